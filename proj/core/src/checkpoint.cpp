#include "shiftlab/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>

#include <fmt/format.h>

#include "shiftlab/errors.hpp"
#include "shiftlab/textio.hpp"

namespace shiftlab {

namespace {

constexpr std::string_view kMagic = "shiftlab-checkpoint 1";

std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return base.string() + suffix;
}

void put_le32(std::string& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<char>((bits >> shift) & 0xffu));
}

float get_le32(const std::string& blob, std::size_t offset) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[offset + static_cast<std::size_t>(i)]))
            << (8 * i);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

void Checkpoint::add_tensor(const std::string& name, const Eigen::MatrixXd& value) {
  if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
    throw UsageError(fmt::format("invalid tensor name '{}'", name));
  }
  if (tensors_.count(name) != 0u) throw UsageError(fmt::format("duplicate tensor '{}'", name));
  order_.push_back(name);
  tensors_.emplace(name, value.cast<float>().cast<double>());
}

void Checkpoint::add_mlp(const std::string& prefix, const Mlp& net) {
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    add_tensor(fmt::format("{}.l{}.weight", prefix, l), net.layers()[l].weight);
    add_tensor(fmt::format("{}.l{}.bias", prefix, l), net.layers()[l].bias);
  }
}

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
  if (key.empty() || key.find_first_of(" \t\n") != std::string::npos || value.find('\n') != std::string::npos) {
    throw UsageError(fmt::format("invalid metadata key '{}'", key));
  }
  meta_[key] = value;
}

bool Checkpoint::has_tensor(const std::string& name) const { return tensors_.count(name) != 0u; }

const Eigen::MatrixXd& Checkpoint::tensor(const std::string& name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DataError(fmt::format("checkpoint has no tensor '{}'", name));
  return it->second;
}

Mlp Checkpoint::mlp(const std::string& prefix) const {
  std::vector<int> sizes;
  std::vector<Layer> layers;
  for (std::size_t l = 0; has_tensor(fmt::format("{}.l{}.weight", prefix, l)); ++l) {
    const auto& w = tensor(fmt::format("{}.l{}.weight", prefix, l));
    const auto& b = tensor(fmt::format("{}.l{}.bias", prefix, l));
    if (b.cols() != 1 || b.rows() != w.rows()) throw DataError(fmt::format("{}: bias shape mismatch", prefix));
    if (sizes.empty()) sizes.push_back(static_cast<int>(w.cols()));
    if (sizes.back() != w.cols()) throw DataError(fmt::format("{}: layer {} fan-in mismatch", prefix, l));
    sizes.push_back(static_cast<int>(w.rows()));
    layers.push_back({w, b.col(0)});
  }
  if (layers.empty()) throw DataError(fmt::format("checkpoint has no network '{}'", prefix));
  Mlp net = Mlp::zeros(sizes);
  for (std::size_t l = 0; l < layers.size(); ++l) net.mutable_layer(l) = layers[l];
  return net;
}

const std::string& Checkpoint::meta(const std::string& key) const {
  const auto it = meta_.find(key);
  if (it == meta_.end()) throw DataError(fmt::format("checkpoint has no metadata '{}'", key));
  return it->second;
}

std::vector<std::filesystem::path> Checkpoint::save(const std::filesystem::path& base) const {
  std::string manifest = std::string(kMagic) + "\n";
  for (const auto& [k, v] : meta_) manifest += fmt::format("meta {} {}\n", k, v);
  std::string blob;
  std::size_t offset = 0;
  for (const auto& name : order_) {
    const auto& t = tensors_.at(name);
    manifest += fmt::format("tensor {} {} {} {}\n", name, t.rows(), t.cols(), offset);
    for (Eigen::Index i = 0; i < t.size(); ++i) put_le32(blob, static_cast<float>(t.data()[i]));
    offset += static_cast<std::size_t>(t.size());
  }
  const auto manifest_path = with_suffix(base, ".manifest");
  const auto blob_path = with_suffix(base, ".bin");
  textio::write_file(manifest_path, manifest);
  textio::write_file(blob_path, blob);
  return {manifest_path, blob_path};
}

Checkpoint Checkpoint::load(const std::filesystem::path& base) {
  const auto lines = textio::read_lines(with_suffix(base, ".manifest"));
  const std::string blob = textio::read_file(with_suffix(base, ".bin"));
  if (lines.empty() || lines[0] != kMagic) throw DataError(fmt::format("{}: not a checkpoint manifest", base.string()));
  Checkpoint ckpt;
  std::size_t expected_offset = 0;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& line = lines[i];
    if (line.rfind("meta ", 0) == 0) {
      const auto rest = std::string_view(line).substr(5);
      const auto sp = rest.find(' ');
      if (sp == std::string_view::npos) throw DataError(fmt::format("manifest line {}: malformed meta", i));
      ckpt.meta_[std::string(rest.substr(0, sp))] = std::string(rest.substr(sp + 1));
      continue;
    }
    const auto tok = textio::tokens(line);
    if (tok.size() != 5 || tok[0] != "tensor") throw DataError(fmt::format("manifest line {}: malformed", i));
    const auto rows = textio::parse_int(tok[2]);
    const auto cols = textio::parse_int(tok[3]);
    const auto offset = static_cast<std::size_t>(textio::parse_int(tok[4]));
    if (rows < 0 || cols < 0 || offset != expected_offset) {
      throw DataError(fmt::format("manifest line {}: bad shape or offset", i));
    }
    const auto count = static_cast<std::size_t>(rows * cols);
    if ((offset + count) * 4 > blob.size()) throw DataError(fmt::format("manifest line {}: blob too short", i));
    Eigen::MatrixXd t(rows, cols);
    for (std::size_t k = 0; k < count; ++k) t.data()[k] = static_cast<double>(get_le32(blob, 4 * (offset + k)));
    const std::string name(tok[1]);
    if (ckpt.tensors_.count(name) != 0u) throw DataError(fmt::format("manifest line {}: duplicate tensor", i));
    ckpt.order_.push_back(name);
    ckpt.tensors_.emplace(name, std::move(t));
    expected_offset += count;
  }
  if (expected_offset * 4 != blob.size()) throw DataError(fmt::format("{}: blob size mismatch", base.string()));
  return ckpt;
}

Mlp round_to_float32(const Mlp& net) {
  Mlp out = net;
  for (std::size_t l = 0; l < out.layers().size(); ++l) {
    Layer& L = out.mutable_layer(l);
    L.weight = L.weight.cast<float>().cast<double>();
    L.bias = L.bias.cast<float>().cast<double>();
  }
  return out;
}

}  // namespace shiftlab
