#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/corpus/vocab.hpp"
#include "persona/error.hpp"
#include "persona/model/model.hpp"

// Checkpoint file layout:
//   line 1: "persona-ckpt 1"
//   line 2: byte length N of the JSON header
//   N bytes: JSON header {stage, seed, corpus_hash, config, vocab, metadata,
//            params: [{name, shape}]}
//   "\n", then every parameter's values as little-endian float64, in
//   header order.
namespace persona::model {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr const char* kCheckpointMagic = "persona-ckpt 1";

struct NamedTensor {
  std::string name;
  Tensor value;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  std::string stage;
  std::uint64_t seed = 0;
  std::string corpus_hash;
  ModelConfig config;
  std::vector<std::string> vocab;
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::vector<NamedTensor> params;

  bool operator==(const Checkpoint&) const = default;

  Vocabulary vocabulary() const {
    auto v = Vocabulary::from_tokens(vocab);
    if (v.size() != vocab.size()) {
      throw ContractError("checkpoint vocabulary has duplicate tokens");
    }
    return v;
  }
};

inline Checkpoint snapshot(const PersonaModel& model, const Vocabulary& vocab, std::uint64_t seed,
                           std::string corpus_hash, std::string stage) {
  if (vocab.size() != model.config().vocab_size) {
    throw ContractError("snapshot: vocabulary size " + std::to_string(vocab.size()) + " != model vocab_size " +
                        std::to_string(model.config().vocab_size));
  }
  Checkpoint c;
  c.stage = std::move(stage);
  c.seed = seed;
  c.corpus_hash = std::move(corpus_hash);
  c.config = model.config();
  c.vocab = vocab.tokens();
  for (const auto& p : model.params().all()) {
    c.params.push_back({p->name(), p->value()});
  }
  return c;
}

// Copies checkpoint values into a model of the same architecture.
inline void load_parameters(PersonaModel& model, const Checkpoint& c) {
  const auto& params = model.params().all();
  if (params.size() != c.params.size()) {
    throw ContractError("checkpoint has " + std::to_string(c.params.size()) + " parameters, architecture expects " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->name() != c.params[i].name || params[i]->shape() != c.params[i].value.shape()) {
      throw ContractError("checkpoint parameter " + c.params[i].name + " " + diff::to_string(c.params[i].value.shape()) +
                          " does not match " + params[i]->name() + " " + diff::to_string(params[i]->shape()));
    }
    params[i]->value() = c.params[i].value;
  }
}

inline std::unique_ptr<PersonaModel> restore(const Checkpoint& c) {
  auto model = std::make_unique<PersonaModel>(c.config, 0);
  load_parameters(*model, c);
  return model;
}

inline std::string serialize(const Checkpoint& c) {
  nlohmann::ordered_json h;
  h["stage"] = c.stage;
  h["seed"] = c.seed;
  h["corpus_hash"] = c.corpus_hash;
  h["config"] = c.config;
  h["vocab"] = c.vocab;
  h["metadata"] = c.metadata;
  auto& list = h["params"] = nlohmann::ordered_json::array();
  for (const auto& p : c.params) {
    list.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  const std::string header = h.dump();
  std::string out = std::string(kCheckpointMagic) + "\n" + std::to_string(header.size()) + "\n" + header + "\n";
  for (const auto& p : c.params) {
    const auto data = p.value.data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  std::size_t pos = 0;
  auto line = [&]() {
    const std::size_t end = bytes.find('\n', pos);
    if (end == std::string::npos) {
      throw ParseError("checkpoint: truncated preamble", 0);
    }
    std::string s = bytes.substr(pos, end - pos);
    pos = end + 1;
    return s;
  };
  if (line() != kCheckpointMagic) {
    throw ParseError("checkpoint: bad magic (not a persona checkpoint)", 0);
  }
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(line());
  } catch (const std::exception&) {
    throw ParseError("checkpoint: bad header length", 0);
  }
  if (pos + header_len + 1 > bytes.size()) {
    throw ParseError("checkpoint: truncated header", 0);
  }
  Checkpoint c;
  std::size_t expected = 0;
  try {
    const auto h = nlohmann::ordered_json::parse(bytes.substr(pos, header_len));
    pos += header_len + 1;
    c.stage = h.at("stage").get<std::string>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.corpus_hash = h.at("corpus_hash").get<std::string>();
    c.config = h.at("config").get<ModelConfig>();
    c.vocab = h.at("vocab").get<std::vector<std::string>>();
    c.metadata = h.at("metadata");
    for (const auto& p : h.at("params")) {
      const auto shape = p.at("shape").get<Shape>();
      c.params.push_back({p.at("name").get<std::string>(), Tensor(shape)});
      expected += c.params.back().value.size();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what(), 0);
  }
  if (bytes.size() - pos != expected * sizeof(double)) {
    throw ParseError("checkpoint: expected " + std::to_string(expected) + " values, payload has " +
                         std::to_string((bytes.size() - pos) / sizeof(double)),
                     0);
  }
  for (auto& p : c.params) {
    const std::size_t n = p.value.size() * sizeof(double);
    std::memcpy(p.value.raw(), bytes.data() + pos, n);
    pos += n;
  }
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = serialize(c);
  std::ofstream f(path, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) {
    throw std::runtime_error("cannot write checkpoint " + path.string());
  }
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw PrerequisiteError("checkpoint not found: " + path.string());
  }
  std::ostringstream buf;
  buf << f.rdbuf();
  return deserialize(buf.str());
}

}  // namespace persona::model
