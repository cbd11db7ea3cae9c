#pragma once

// Checkpoint files and attention-trace export. Both are JSON documents; the
// checkpoint stores the config, vocabulary, every named tensor and a theta
// checksum that is verified on load.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "pbd/error.hpp"
#include "pbd/model.hpp"
#include "pbd/text.hpp"

namespace pbd {

inline constexpr int kCheckpointVersion = 1;

template <typename T>
constexpr const char* scalar_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline nlohmann::ordered_json config_to_json(const PrefixLMConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_len", c.max_len},
          {"n_prefix", c.n_prefix}};
}

inline PrefixLMConfig config_from_json(const nlohmann::json& j) {
  PrefixLMConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.n_prefix = j.at("n_prefix").get<std::size_t>();
  c.validate();
  return c;
}

template <typename T>
nlohmann::ordered_json checkpoint_to_json(const PrefixLM<T>& model) {
  const auto& p = model.params;
  const ParamLayout layout(p.config);
  nlohmann::ordered_json j;
  j["format"] = "pbd-checkpoint";
  j["version"] = kCheckpointVersion;
  j["scalar"] = scalar_name<T>();
  j["config"] = config_to_json(p.config);
  j["vocab"] = model.vocab.tokens();
  j["theta_checksum"] = hex64(checksum(p.theta));
  j["phi_checksum"] = hex64(checksum(p.phi));
  auto& tensors = j["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : layout.tensors) {
    const auto& buf = t.in_phi ? p.phi : p.theta;
    std::vector<double> data(buf.begin() + static_cast<std::ptrdiff_t>(t.offset),
                             buf.begin() + static_cast<std::ptrdiff_t>(t.offset + t.size()));
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"data", std::move(data)}});
  }
  return j;
}

template <typename T>
PrefixLM<T> checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "pbd-checkpoint") throw Error("not a checkpoint file");
  if (j.value("version", 0) != kCheckpointVersion) {
    throw Error("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  }
  if (j.at("scalar").get<std::string>() != scalar_name<T>()) {
    throw Error("checkpoint holds " + j.at("scalar").get<std::string>() + " parameters, expected " +
                scalar_name<T>());
  }
  PrefixLM<T> m;
  m.vocab = Vocab::from_tokens(j.at("vocab").get<std::vector<std::string>>());
  const PrefixLMConfig c = config_from_json(j.at("config"));
  if (c.vocab_size != m.vocab.size()) throw Error("checkpoint vocabulary size mismatch");
  const ParamLayout layout(c);
  m.params.config = c;
  m.params.theta.assign(layout.theta_size, T(0));
  m.params.phi.assign(layout.phi_size, T(0));
  const auto& tensors = j.at("tensors");
  if (tensors.size() != layout.tensors.size()) throw Error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < layout.tensors.size(); ++i) {
    const auto& t = layout.tensors[i];
    const auto& jt = tensors[i];
    if (jt.at("name").get<std::string>() != t.name) {
      throw Error("checkpoint tensor " + std::to_string(i) + " is " + jt.at("name").get<std::string>() +
                  ", expected " + t.name);
    }
    const auto data = jt.at("data").get<std::vector<double>>();
    if (data.size() != t.size()) throw Error("checkpoint tensor " + t.name + " has the wrong size");
    auto& buf = t.in_phi ? m.params.phi : m.params.theta;
    for (std::size_t k = 0; k < data.size(); ++k) buf[t.offset + k] = static_cast<T>(data[k]);
  }
  if (hex64(checksum(m.params.theta)) != j.at("theta_checksum").get<std::string>()) {
    throw Error("checkpoint theta checksum mismatch");
  }
  return m;
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::ordered_json& j,
                            int indent = -1) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(indent) << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// Keeps key order, for documents that are re-emitted.
inline nlohmann::ordered_json read_ordered_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

template <typename T>
void save_checkpoint(const PrefixLM<T>& model, const std::filesystem::path& path) {
  write_json_file(path, checkpoint_to_json(model));
}

template <typename T>
PrefixLM<T> load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_json<T>(read_json_file(path));
}

// Attention trace with the tokens it was computed on.
template <typename T>
nlohmann::ordered_json trace_to_json(const AttentionTrace<T>& t, const TokenSeq& tokens = {}) {
  nlohmann::ordered_json j;
  j["n_layers"] = t.n_layers;
  j["n_heads"] = t.n_heads;
  j["n_prefix"] = t.n_prefix;
  j["length"] = t.length;
  if (!tokens.empty()) j["tokens"] = tokens;
  j["probs"] = std::vector<double>(t.probs.begin(), t.probs.end());
  return j;
}

inline AttentionTrace<double> trace_from_json(const nlohmann::json& j) {
  AttentionTrace<double> t;
  t.n_layers = j.at("n_layers").get<std::size_t>();
  t.n_heads = j.at("n_heads").get<std::size_t>();
  t.n_prefix = j.at("n_prefix").get<std::size_t>();
  t.length = j.at("length").get<std::size_t>();
  t.probs = j.at("probs").get<std::vector<double>>();
  if (t.probs.size() != t.n_layers * t.n_heads * t.length * t.cols()) {
    throw Error("attention trace has the wrong number of entries");
  }
  return t;
}

}  // namespace pbd
