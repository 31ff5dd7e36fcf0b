#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "revlm/common.hpp"
#include "revlm/model.hpp"

namespace revlm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts need byte swapping");

/// Adam moment accumulators plus the global step counter.
struct OptimizerState {
  Parameters<float> m;
  Parameters<float> v;
  std::uint64_t step = 0;
};

struct Checkpoint {
  ModelConfig config;
  Parameters<float> params;
  Orientation orientation = Orientation::kForward;
  std::string tokenizer_fingerprint;
  std::uint64_t train_step = 0;
  std::optional<OptimizerState> optimizer;
};

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'R', 'E', 'V', 'L', 'M', 'C', 'K', '1'};

inline void write_tensor(std::ofstream& out, const Mat<float>& t) {
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
}

inline void read_tensor(std::ifstream& in, Mat<float>& t) {
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(t.size())));
}

}  // namespace ckpt_detail

/// File layout: 8-byte magic, u64 little-endian header length, header
/// JSON, then the tensors named in the header as row-major little-endian
/// 32-bit floats, in header order.
inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  auto params_list = tensor_list(ckpt.params);

  nlohmann::json header;
  header["format_version"] = 1;
  header["model"] = ckpt.config;
  header["orientation"] = to_string(ckpt.orientation);
  header["tokenizer_fingerprint"] = ckpt.tokenizer_fingerprint;
  header["train_step"] = ckpt.train_step;
  header["has_optimizer_state"] = ckpt.optimizer.has_value();
  if (ckpt.optimizer) header["adam_step"] = ckpt.optimizer->step;

  nlohmann::json tensors = nlohmann::json::array();
  auto describe = [&tensors](const std::string& name, const Mat<float>& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  };
  for (const auto& [name, t] : params_list) describe(name, *t);
  if (ckpt.optimizer) {
    for (const auto& [name, t] : tensor_list(ckpt.optimizer->m)) describe("adam_m." + name, *t);
    for (const auto& [name, t] : tensor_list(ckpt.optimizer->v)) describe("adam_v." + name, *t);
  }
  header["tensors"] = std::move(tensors);

  const std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path.string());
  out.write(ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic));
  const std::uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : params_list) ckpt_detail::write_tensor(out, *t);
  if (ckpt.optimizer) {
    for (const auto& [name, t] : tensor_list(ckpt.optimizer->m)) ckpt_detail::write_tensor(out, *t);
    for (const auto& [name, t] : tensor_list(ckpt.optimizer->v)) ckpt_detail::write_tensor(out, *t);
  }
  if (!out) throw std::runtime_error("failed while writing checkpoint: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(std::begin(magic), std::end(magic), ckpt_detail::kMagic))
    throw ValidationError(path.string() + ": not a checkpoint file (bad magic)");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw ValidationError(path.string() + ": truncated checkpoint header");

  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded())
    throw ValidationError(path.string() + ": corrupt checkpoint header JSON");

  Checkpoint ckpt;
  try {
    if (header.at("format_version").get<int>() != 1)
      throw ValidationError(path.string() + ": unsupported checkpoint format version");
    ckpt.config = header.at("model").get<ModelConfig>();
    ckpt.config.validate();
    ckpt.orientation = orientation_from_string(header.at("orientation").get<std::string>());
    ckpt.tokenizer_fingerprint = header.at("tokenizer_fingerprint").get<std::string>();
    ckpt.train_step = header.at("train_step").get<std::uint64_t>();

    ckpt.params = shaped_zeros<float>(ckpt.config);
    const bool has_opt = header.value("has_optimizer_state", false);
    if (has_opt) {
      ckpt.optimizer.emplace();
      ckpt.optimizer->m = shaped_zeros<float>(ckpt.config);
      ckpt.optimizer->v = shaped_zeros<float>(ckpt.config);
      ckpt.optimizer->step = header.at("adam_step").get<std::uint64_t>();
    }

    // The tensor index must match the shapes the config implies, in order.
    std::vector<std::pair<std::string, Mat<float>*>> expected = tensor_list(ckpt.params);
    if (has_opt) {
      for (auto& [name, t] : tensor_list(ckpt.optimizer->m))
        expected.emplace_back("adam_m." + name, t);
      for (auto& [name, t] : tensor_list(ckpt.optimizer->v))
        expected.emplace_back("adam_v." + name, t);
    }
    const auto& tensors = header.at("tensors");
    if (tensors.size() != expected.size())
      throw ValidationError(path.string() + ": tensor count does not match model config");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& [name, t] = expected[i];
      if (tensors[i].at("name").get<std::string>() != name ||
          tensors[i].at("rows").get<Eigen::Index>() != t->rows() ||
          tensors[i].at("cols").get<Eigen::Index>() != t->cols())
        throw ValidationError(path.string() + ": tensor '" + name +
                              "' missing or shape-inconsistent with the model config");
      ckpt_detail::read_tensor(in, *t);
    }
    if (!in) throw ValidationError(path.string() + ": truncated tensor payload");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return ckpt;
}

}  // namespace revlm
