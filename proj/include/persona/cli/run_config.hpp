#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "persona/corpus/dataset.hpp"
#include "persona/model/config.hpp"
#include "persona/training/trainer.hpp"

namespace persona::cli {

using Json = nlohmann::ordered_json;

// Bad config file contents or flag values: exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainSection {
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  std::uint64_t seed = 1;
  double alpha = 0.1;
  bool share_first_layer = true;
  bool joint_mle_for_detector = true;
  double clip_norm = 1.0;
  std::size_t val_hits_examples = 200;
  bool keep_epoch_checkpoints = true;
  std::string corpus_dir;
};

struct TransferSection {
  int epochs = 3;
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

struct EvalSection {
  std::size_t k = 19;
  std::uint64_t seed = 0;
};

// Every field is optional in the JSON file; absent fields keep the
// defaults above and in DatasetOptions / ModelConfig.
struct RunConfig {
  corpus::DatasetOptions corpus;
  model::ModelConfig model;
  TrainSection train;
  TransferSection transfer;
  EvalSection eval;
};

namespace detail {

// Reads known keys of one JSON object and rejects everything else.
class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) {
      throw ConfigError("config section '" + name_ + "' must be a JSON object");
    }
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      return;
    }
    const Json& v = j_.at(key);
    const std::string where = name_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) {
        throw ConfigError(where + " must be true or false");
      }
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0)) {
        throw ConfigError(where + " must be a" + (std::is_unsigned_v<T> ? " non-negative" : "n") + " integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) {
        throw ConfigError(where + " must be a number");
      }
    } else {
      if (!v.is_string()) {
        throw ConfigError(where + " must be a string");
      }
    }
    out = v.get<T>();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) {
        throw ConfigError("unknown config field '" + name_ + "." + key + "'");
      }
    }
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

template <class Fn>
void section(const Json& root, const char* name, Fn&& fn) {
  if (!root.contains(name)) {
    return;
  }
  Section s(root.at(name), name);
  fn(s);
  s.finish();
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  try {
    corpus::validate(c.corpus);
    auto arch = c.model;
    arch.vocab_size = 8;
    arch.persona_mode = model::PersonaMode::none;
    arch.detector_kind = model::DetectorKind::none;
    arch.alpha = c.train.alpha;
    arch.validate();
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  if (c.train.epochs < 0 || c.transfer.epochs < 0) {
    throw ConfigError("epochs must be >= 0");
  }
  if (c.train.batch_size == 0 || c.transfer.batch_size == 0) {
    throw ConfigError("batch_size must be positive");
  }
  if (!(c.train.lr > 0.0) || !(c.transfer.lr > 0.0)) {
    throw ConfigError("lr must be positive");
  }
  if (c.train.clip_norm < 0.0) {
    throw ConfigError("train.clip_norm must be >= 0 (0 disables clipping)");
  }
  if (c.eval.k == 0) {
    throw ConfigError("eval.k must be positive");
  }
}

inline RunConfig parse_run_config(const Json& root) {
  if (!root.is_object()) {
    throw ConfigError("config must be a JSON object");
  }
  RunConfig c;
  for (const auto& [key, value] : root.items()) {
    if (key != "corpus" && key != "model" && key != "train" && key != "transfer" && key != "eval") {
      throw ConfigError("unknown config section '" + key + "' (corpus|model|train|transfer|eval)");
    }
  }
  detail::section(root, "corpus", [&](detail::Section& s) {
    auto& g = c.corpus.generator;
    s.read("n_train_dialogues", c.corpus.n_train_dialogues);
    s.read("n_valid_dialogues", c.corpus.n_valid_dialogues);
    s.read("n_test_dialogues", c.corpus.n_test_dialogues);
    s.read("turns_per_dialogue", g.turns_per_dialogue);
    s.read("p_generic", g.p_generic);
    s.read("p_react", g.p_react);
    s.read("persona_coherence", g.persona_coherence);
    s.read("seed", g.seed);
    s.read("n_persona_free_dialogues", c.corpus.n_persona_free_dialogues);
  });
  detail::section(root, "model", [&](detail::Section& s) {
    auto& m = c.model;
    s.read("d_model", m.d_model);
    s.read("n_heads", m.n_heads);
    s.read("n_enc_layers", m.n_enc_layers);
    s.read("n_dec_layers", m.n_dec_layers);
    s.read("ffn_mult", m.ffn_mult);
    s.read("max_len", m.max_len);
    s.read("dropout", m.dropout);
    s.read("max_response_len", m.max_response_len);
  });
  detail::section(root, "train", [&](detail::Section& s) {
    auto& t = c.train;
    s.read("epochs", t.epochs);
    s.read("batch_size", t.batch_size);
    s.read("lr", t.lr);
    s.read("seed", t.seed);
    s.read("alpha", t.alpha);
    s.read("share_first_layer", t.share_first_layer);
    s.read("joint_mle_for_detector", t.joint_mle_for_detector);
    s.read("clip_norm", t.clip_norm);
    s.read("val_hits_examples", t.val_hits_examples);
    s.read("keep_epoch_checkpoints", t.keep_epoch_checkpoints);
    s.read("corpus_dir", t.corpus_dir);
  });
  detail::section(root, "transfer", [&](detail::Section& s) {
    s.read("epochs", c.transfer.epochs);
    s.read("lr", c.transfer.lr);
    s.read("batch_size", c.transfer.batch_size);
    s.read("seed", c.transfer.seed);
  });
  detail::section(root, "eval", [&](detail::Section& s) {
    s.read("k", c.eval.k);
    s.read("seed", c.eval.seed);
  });
  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) {
    throw ConfigError("cannot read config file " + path.string());
  }
  Json root;
  try {
    root = Json::parse(f);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(root);
}

// Fully resolved config, defaults applied.
inline Json to_json(const RunConfig& c) {
  const auto& g = c.corpus.generator;
  const auto& m = c.model;
  const auto& t = c.train;
  return {
      {"corpus",
       {{"n_train_dialogues", c.corpus.n_train_dialogues},
        {"n_valid_dialogues", c.corpus.n_valid_dialogues},
        {"n_test_dialogues", c.corpus.n_test_dialogues},
        {"turns_per_dialogue", g.turns_per_dialogue},
        {"p_generic", g.p_generic},
        {"p_react", g.p_react},
        {"persona_coherence", g.persona_coherence},
        {"seed", g.seed},
        {"n_persona_free_dialogues", c.corpus.n_persona_free_dialogues}}},
      {"model",
       {{"d_model", m.d_model},
        {"n_heads", m.n_heads},
        {"n_enc_layers", m.n_enc_layers},
        {"n_dec_layers", m.n_dec_layers},
        {"ffn_mult", m.ffn_mult},
        {"max_len", m.max_len},
        {"dropout", m.dropout},
        {"max_response_len", m.max_response_len}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"seed", t.seed},
        {"alpha", t.alpha},
        {"share_first_layer", t.share_first_layer},
        {"joint_mle_for_detector", t.joint_mle_for_detector},
        {"clip_norm", t.clip_norm},
        {"val_hits_examples", t.val_hits_examples},
        {"keep_epoch_checkpoints", t.keep_epoch_checkpoints},
        {"corpus_dir", t.corpus_dir}}},
      {"transfer",
       {{"epochs", c.transfer.epochs},
        {"lr", c.transfer.lr},
        {"batch_size", c.transfer.batch_size},
        {"seed", c.transfer.seed}}},
      {"eval", {{"k", c.eval.k}, {"seed", c.eval.seed}}},
  };
}

inline void write_resolved_config(const RunConfig& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "resolved_config.json") << to_json(c).dump(2) << "\n";
}

inline training::TrainPlan train_plan(const RunConfig& c, training::Protocol protocol, model::PersonaMode mode) {
  training::TrainPlan p;
  p.protocol = protocol;
  p.persona_mode = mode;
  p.epochs = c.train.epochs;
  p.batch_size = c.train.batch_size;
  p.lr = c.train.lr;
  p.seed = c.train.seed;
  p.alpha = c.train.alpha;
  p.share_first_layer = c.train.share_first_layer;
  p.joint_mle_for_detector = c.train.joint_mle_for_detector;
  p.clip_norm = c.train.clip_norm;
  p.model = c.model;
  p.val_hits_examples = c.train.val_hits_examples;
  p.keep_epoch_checkpoints = c.train.keep_epoch_checkpoints;
  return p;
}

inline training::TransferPlan transfer_plan(const RunConfig& c) {
  training::TransferPlan p;
  p.epochs = c.transfer.epochs;
  p.lr = c.transfer.lr;
  p.batch_size = c.transfer.batch_size;
  p.seed = c.transfer.seed;
  p.clip_norm = c.train.clip_norm;
  p.val_hits_examples = c.train.val_hits_examples;
  p.keep_epoch_checkpoints = c.train.keep_epoch_checkpoints;
  return p;
}

}  // namespace persona::cli
