#include "shiftlab/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamEvalContext = 0x1000;
constexpr std::uint64_t kStreamEvalEpisodes = 0x2000;
constexpr std::uint64_t kStreamEmbed = 0x3000;
constexpr std::uint64_t kStreamProbe = 0x4000;

std::string mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return fmt::format("{:.4f} +/- {:.4f}", mean, std::sqrt(var));
}

std::uint64_t seed_for(std::uint64_t seed, std::uint64_t stream, int task_id) {
  return derive_seed(seed, stream + static_cast<std::uint64_t>(task_id));
}

}  // namespace

int exit_code_for_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const ConfigError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const UsageError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitIo;
  } catch (const DataError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitIo;
  } catch (const TrainingError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitFailure;
  }
}

fs::path dataset_path(const fs::path& data_dir, int task_id) {
  return data_dir / fmt::format("task_{}.txt", task_id);
}

std::vector<TaskSpec> load_tasks(const fs::path& data_dir) { return load_task_set(data_dir / "tasks.txt"); }

std::vector<Dataset> load_split(const fs::path& data_dir, Split split) {
  std::vector<Dataset> out;
  for (const auto& task : load_tasks(data_dir)) {
    if (task.split != split) continue;
    auto d = load_dataset(dataset_path(data_dir, task.task_id));
    if (!(d.task == task)) throw DataError(fmt::format("dataset task_{} does not match tasks.txt", task.task_id));
    out.push_back(std::move(d));
  }
  if (out.empty()) throw DataError(fmt::format("no {} tasks in '{}'", to_string(split), data_dir.string()));
  return out;
}

fs::path checkpoint_base(const fs::path& dir, std::uint64_t seed, const std::string& name) {
  return dir / fmt::format("seed_{}", seed) / name;
}

TrainedModel load_model(const fs::path& dir, std::uint64_t seed, const std::string& name) {
  return TrainedModel::from_checkpoint(Checkpoint::load(checkpoint_base(dir, seed, name)));
}

Context build_context(ContextSource regime, const TrainedModel& model, const TaskSpec& task, const Dataset* dataset,
                      const EvalConfig& cfg, std::uint64_t seed) {
  const auto policy = as_policy(model.actor);
  switch (regime) {
    case ContextSource::Offline:
      if (dataset == nullptr) throw UsageError("offline contexts need the task dataset");
      return sample_offline_context(*dataset, cfg.context_size, seed);
    case ContextSource::OnlinePrior:
      return explore_prior(task, policy, model.encoder, cfg, seed);
    case ContextSource::OnlineNonprior:
      return explore_nonprior(task, policy, model.encoder, cfg, seed);
  }
  throw UsageError("unknown regime");
}

void write_manifest(const fs::path& out_dir, const std::vector<fs::path>& files) {
  std::vector<std::string> lines;
  for (const auto& f : files) {
    lines.push_back(fmt::format("{}  {}", textio::sha256_hex(textio::read_file(f)),
                                fs::relative(f, out_dir).generic_string()));
  }
  std::sort(lines.begin(), lines.end(), [](const std::string& a, const std::string& b) {
    return a.substr(66) < b.substr(66);
  });
  std::string body;
  for (const auto& l : lines) body += l + "\n";
  textio::write_file(out_dir / "manifest.txt", body);
}

void run_gen_data(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto tasks = sample_tasks(cfg.family, cfg.n_train, cfg.n_test, cfg.seeds.front());
  std::vector<fs::path> files;
  files.push_back(cfg.out_dir / "tasks.txt");
  save_task_set(tasks, files.back());
  fmt::print(out, "{:>7} {:>6} {:>12} {:>12}\n", "task_id", "split", "param", "transitions");
  std::size_t per_task = 0;
  for (const auto& task : tasks) {
    const auto d = collect_dataset(task, cfg.episodes_per_checkpoint, cfg.seeds.front());
    validate_dataset(d);
    files.push_back(dataset_path(cfg.out_dir, task.task_id));
    save_dataset(d, files.back());
    per_task = d.transitions.size();
    fmt::print(out, "{:>7} {:>6} {:>12.6f} {:>12}\n", task.task_id, to_string(task.split), task.param,
               d.transitions.size());
  }
  write_manifest(cfg.out_dir, files);
  fmt::print(out, "{} tasks ({} train, {} test), {} transitions per task, written to {}\n", tasks.size(), cfg.n_train,
             cfg.n_test, per_task, cfg.out_dir.string());
}

void run_train(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto train = load_split(cfg.data_dir, Split::Train);
  std::vector<fs::path> files;
  files.push_back(cfg.out_dir / "config.txt");
  textio::write_file(files.back(), cfg.to_text());
  for (const auto seed : cfg.seeds) {
    const auto started = std::chrono::steady_clock::now();
    std::string log;
    auto result = meta_train(cfg, train, seed, [&](const TrainLogEntry& e) {
      log += e.to_line() + "\n";
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      fmt::print(out, "seed={} {} ({:.1f}s)\n", seed, e.to_line(), secs);
      out.flush();
    });
    const auto dir = cfg.out_dir / fmt::format("seed_{}", seed);
    files.push_back(dir / "train_log.txt");
    textio::write_file(files.back(), log);
    for (const auto& p : result.final_model.to_checkpoint().save(dir / "final")) files.push_back(p);
    for (const auto& p : result.best_model.to_checkpoint().save(dir / "best")) files.push_back(p);
  }
  write_manifest(cfg.out_dir, files);
}

std::vector<MetricsRecord> run_eval(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto regime = parse_context_source(cfg.regime);
  if (cfg.method == Method::CsroNoNp && regime == ContextSource::OnlineNonprior) {
    throw UsageError("--regime online_nonprior contradicts --method csro_no_np");
  }
  const auto eval_cfg = cfg.eval_config();
  const auto tasks = load_tasks(cfg.data_dir);
  std::vector<Dataset> test;
  for (const auto& t : tasks) {
    if (t.split != Split::Test) continue;
    if (regime == ContextSource::Offline) {
      test.push_back(load_dataset(dataset_path(cfg.data_dir, t.task_id)));
      if (eval_cfg.context_size > static_cast<int>(test.back().transitions.size())) {
        throw UsageError(fmt::format("--n-c: N_c = {} exceeds the {} transitions of task {}", eval_cfg.context_size,
                                     test.back().transitions.size(), t.task_id));
      }
    } else {
      Dataset d;
      d.task = t;
      test.push_back(std::move(d));
    }
  }
  if (test.empty()) throw DataError("no test tasks to evaluate");

  std::vector<TrainedModel> models;
  for (const auto seed : cfg.seeds) {
    models.push_back(load_model(cfg.checkpoint_dir, seed));
    const auto trained = models.back().method;
    const bool compatible = trained == cfg.method || (trained != Method::Focal && cfg.method != Method::Focal);
    if (!compatible || models.back().family != cfg.family) {
      throw UsageError(fmt::format("checkpoint for seed {} was trained as {} on {}, not {} on {}", seed,
                                   to_string(trained), to_string(models.back().family), to_string(cfg.method),
                                   to_string(cfg.family)));
    }
  }

  std::vector<MetricsRecord> records;
  std::vector<double> returns;
  std::string body;
  for (const auto& d : test) {
    for (std::size_t si = 0; si < cfg.seeds.size(); ++si) {
      const auto seed = cfg.seeds[si];
      const auto& model = models[si];
      const auto ctx = build_context(regime, model, d.task, &d, eval_cfg,
                                     seed_for(seed, kStreamEvalContext, d.task.task_id));
      MetricsRecord rec;
      rec.method = std::string(to_string(cfg.method));
      rec.regime = std::string(to_string(regime));
      rec.task_id = d.task.task_id;
      rec.seed = seed;
      rec.avg_return = evaluate(d.task, as_policy(model.actor), model.encoder, ctx, eval_cfg.eval_episodes,
                                seed_for(seed, kStreamEvalEpisodes, d.task.task_id));
      rec.aux["context_size"] = static_cast<double>(ctx.size());
      rec.aux["prior_draws"] = ctx.prior_draws;
      body += rec.to_line() + "\n";
      returns.push_back(rec.avg_return);
      records.push_back(std::move(rec));
    }
  }
  const auto path = cfg.out_dir / "metrics.txt";
  textio::write_file(path, body);
  write_manifest(cfg.out_dir, {path});
  fmt::print(out, "method={} regime={} records={} return={}\n", to_string(cfg.method), to_string(regime),
             records.size(), mean_std(returns));
  return records;
}

void run_probe(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto train = load_split(cfg.data_dir, Split::Train);
  std::string body;
  std::vector<double> accs;
  for (const auto seed : cfg.seeds) {
    const auto model = load_model(cfg.checkpoint_dir, seed);
    const double acc = probe_policy_info(train, as_embedder(model.encoder), derive_seed(seed, kStreamProbe));
    body += fmt::format("method={} seed={} probe_accuracy={}\n", to_string(model.method), seed,
                        textio::format_double(acc));
    accs.push_back(acc);
    fmt::print(out, "seed={} probe_accuracy={:.4f}\n", seed, acc);
  }
  const auto path = cfg.out_dir / "probe.txt";
  textio::write_file(path, body);
  write_manifest(cfg.out_dir, {path});
  fmt::print(out, "probe accuracy {} (chance 0.25)\n", mean_std(accs));
}

void run_embed(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const auto eval_cfg = cfg.eval_config();
  std::vector<TaskSpec> test;
  for (const auto& t : load_tasks(cfg.data_dir)) {
    if (t.split == Split::Test) test.push_back(t);
  }
  if (test.empty()) throw DataError("no test tasks to embed");
  std::vector<fs::path> files;
  std::string body;
  for (const auto seed : cfg.seeds) {
    const auto model = load_model(cfg.checkpoint_dir, seed);
    const auto policy = as_policy(model.actor);
    std::vector<LabeledContext> contexts;
    for (const auto& task : test) {
      for (int j = 0; j < cfg.embed_contexts; ++j) {
        const auto ctx_seed = derive_seed(seed_for(seed, kStreamEmbed, task.task_id), static_cast<std::uint64_t>(j));
        contexts.push_back({task.task_id, task.param, explore_nonprior(task, policy, model.encoder, eval_cfg, ctx_seed)});
      }
    }
    files.push_back(cfg.out_dir / fmt::format("embedding_seed_{}.txt", seed));
    const auto report = embed_and_project(model.encoder, contexts, files.back());
    body += fmt::format("method={} seed={} silhouette={} rows={}\n", to_string(model.method), seed,
                        textio::format_double(report.silhouette), contexts.size());
    fmt::print(out, "seed={} silhouette={:.4f} rows={}\n", seed, report.silhouette, contexts.size());
  }
  files.push_back(cfg.out_dir / "embed.txt");
  textio::write_file(files.back(), body);
  write_manifest(cfg.out_dir, files);
}

int run_verb(std::string_view verb, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    if (verb == "gen-data") {
      run_gen_data(cfg, out);
    } else if (verb == "train") {
      run_train(cfg, out);
    } else if (verb == "eval") {
      run_eval(cfg, out);
    } else if (verb == "probe") {
      run_probe(cfg, out);
    } else if (verb == "embed") {
      run_embed(cfg, out);
    } else {
      throw UsageError(fmt::format("unknown command '{}'", verb));
    }
    return kExitOk;
  } catch (...) {
    return exit_code_for_current_exception(err);
  }
}

}  // namespace shiftlab
