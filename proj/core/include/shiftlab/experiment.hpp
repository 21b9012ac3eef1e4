#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "shiftlab/config.hpp"
#include "shiftlab/datagen.hpp"
#include "shiftlab/metatest.hpp"
#include "shiftlab/trainer.hpp"

namespace shiftlab {

/// Process exit codes shared by every command.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIo = 3, kExitNumeric = 4 };

/// Maps the library's exception types to exit codes; call from a catch block.
int exit_code_for_current_exception(std::ostream& err);

/// Output layout, relative to the --out directory:
///   gen-data  tasks.txt, task_<id>.txt
///   train     config.txt, seed_<s>/{final,best}.{manifest,bin}, seed_<s>/train_log.txt
///   eval      metrics.txt
///   probe     probe.txt
///   embed     embed.txt, embedding_seed_<s>.txt
/// Every command also writes manifest.txt: "<sha256>  <relative path>" per
/// produced file, sorted by path.
void run_gen_data(const RunConfig& cfg, std::ostream& out);
void run_train(const RunConfig& cfg, std::ostream& out);
/// Reads checkpoints from cfg.checkpoint_dir/seed_<s>/final.
std::vector<MetricsRecord> run_eval(const RunConfig& cfg, std::ostream& out);
void run_probe(const RunConfig& cfg, std::ostream& out);
void run_embed(const RunConfig& cfg, std::ostream& out);

/// Dispatches on a verb name and converts exceptions into exit codes.
int run_verb(std::string_view verb, const RunConfig& cfg, std::ostream& out, std::ostream& err);

// Building blocks shared with the acceptance suite.

std::filesystem::path dataset_path(const std::filesystem::path& data_dir, int task_id);
std::vector<TaskSpec> load_tasks(const std::filesystem::path& data_dir);
/// Throws IoError / DataError on missing or malformed files.
std::vector<Dataset> load_split(const std::filesystem::path& data_dir, Split split);
std::filesystem::path checkpoint_base(const std::filesystem::path& dir, std::uint64_t seed,
                                      const std::string& name = "final");
TrainedModel load_model(const std::filesystem::path& dir, std::uint64_t seed, const std::string& name = "final");
/// Test-time context for one (task, seed) under the given regime.
Context build_context(ContextSource regime, const TrainedModel& model, const TaskSpec& task, const Dataset* dataset,
                      const EvalConfig& cfg, std::uint64_t seed);
void write_manifest(const std::filesystem::path& out_dir, const std::vector<std::filesystem::path>& files);

}  // namespace shiftlab
