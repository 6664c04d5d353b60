#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/corpus/dataset.hpp"
#include "persona/diff/adam.hpp"
#include "persona/eval/suite.hpp"
#include "persona/model/checkpoint.hpp"
#include "persona/training/losses.hpp"

namespace persona::training {

using corpus::Corpus;
using model::Checkpoint;
using model::DetectorKind;
using model::ModelConfig;
using model::PersonaMode;
using model::Vocabulary;

enum class Protocol { baseline, with_encoder, approximator, generator };

inline std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::baseline:
      return "baseline";
    case Protocol::with_encoder:
      return "with_encoder";
    case Protocol::approximator:
      return "approximator";
    case Protocol::generator:
      return "generator";
  }
  return "baseline";
}

inline Protocol parse_protocol(std::string_view s) {
  for (Protocol p : {Protocol::baseline, Protocol::with_encoder, Protocol::approximator, Protocol::generator}) {
    if (to_string(p) == s) {
      return p;
    }
  }
  throw ContractError("unknown protocol '" + std::string(s) + "' (baseline|with_encoder|approximator|generator)");
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_ppl = 0.0;
  double val_hits1 = 0.0;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

inline nlohmann::ordered_json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},         {"train_loss", e.train_loss}, {"val_ppl", e.val_ppl},
          {"val_hits1", e.val_hits1}, {"wall_ms", e.wall_ms},       {"seed", e.seed}};
}

struct TrainPlan {
  Protocol protocol = Protocol::baseline;
  PersonaMode persona_mode = PersonaMode::none;
  int epochs = 10;
  std::size_t batch_size = 32;
  double lr = 3e-4;
  std::uint64_t seed = 1;
  double alpha = 0.1;
  bool share_first_layer = true;
  bool joint_mle_for_detector = true;
  double clip_norm = 1.0;
  // Architecture; persona_mode, detector_kind, alpha and sharing are set
  // from the fields above.
  ModelConfig model;
  // Validation Hits@1 runs on the first n validation examples.
  std::size_t val_hits_examples = 200;
  std::optional<std::filesystem::path> out_dir;
  bool keep_epoch_checkpoints = true;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

inline DetectorKind detector_for(Protocol p, PersonaMode mode) {
  switch (p) {
    case Protocol::baseline:
      if (mode != PersonaMode::none) {
        throw ContractError("baseline protocol trains without personas (persona mode none)");
      }
      return DetectorKind::none;
    case Protocol::with_encoder:
      if (mode == PersonaMode::none) {
        throw ContractError("with_encoder protocol needs persona mode self, their, both or prepend");
      }
      return mode == PersonaMode::prepend ? DetectorKind::none : DetectorKind::encoder;
    case Protocol::approximator:
    case Protocol::generator:
      if (mode == PersonaMode::none || mode == PersonaMode::prepend) {
        throw ContractError(to_string(p) + " protocol needs persona mode self, their or both");
      }
      return p == Protocol::approximator ? DetectorKind::approximator : DetectorKind::generator;
  }
  return DetectorKind::none;
}

inline ModelConfig model_config_for(const TrainPlan& plan, std::size_t vocab_size) {
  ModelConfig c = plan.model;
  c.vocab_size = vocab_size;
  c.persona_mode = plan.persona_mode;
  c.detector_kind = detector_for(plan.protocol, plan.persona_mode);
  c.alpha = plan.alpha;
  c.share_first_layer = plan.share_first_layer;
  c.validate();
  return c;
}

namespace detail {

struct Prepared {
  model::ModelInput input;
  std::vector<int> response;
};

inline std::vector<Prepared> prepare_all(const Vocabulary& vocab, const ModelConfig& config, const Corpus& corpus) {
  std::vector<Prepared> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) {
    out.push_back({model::prepare_input(vocab, config, ex), vocab.encode(ex.response)});
  }
  return out;
}

inline void write_log_line(const std::filesystem::path& dir, const EpochLog& e, bool truncate) {
  std::ofstream f(dir / "log.jsonl", truncate ? std::ios::trunc : std::ios::app);
  f << to_json(e).dump() << "\n";
}

inline Vocabulary union_vocab(const Vocabulary& base, const Corpus& corpus) {
  Vocabulary v = base;
  const Vocabulary extra = corpus::build_vocab(corpus);
  for (const auto& t : extra.tokens()) {
    v.add(t);
  }
  return v;
}

struct Loop {
  model::PersonaModel& model;
  const Vocabulary& vocab;
  const Corpus& train;
  const Corpus& valid;
  StepSettings settings;
  int epochs;
  std::size_t batch_size;
  double lr;
  double clip_norm;
  std::uint64_t seed;
  std::size_t val_hits_examples;
  std::string stage;
  std::string corpus_hash;
  std::optional<std::filesystem::path> out_dir;
  bool keep_epoch_checkpoints;
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(int epoch)> after_epoch;

  double validation_hits() const {
    const std::size_t n = std::min(val_hits_examples, valid.size());
    if (n == 0 || valid.size() < 20) {
      return 0.0;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto in = model::prepare_input(vocab, model.config(), valid[i]);
      const Tensor mem = model.inference_memory(in);
      std::vector<double> scores;
      for (const auto& c : eval::candidate_set(valid, i, 19, seed)) {
        scores.push_back(model.score_with_memory(mem, vocab.encode(c)));
      }
      hits += eval::gold_ranks_first(scores) ? 1 : 0;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
  }

  TrainResult run() {
    if (train.empty() || valid.empty()) {
      throw ContractError("training needs non-empty train and validation corpora");
    }
    if (batch_size == 0) {
      throw ContractError("batch_size must be positive");
    }
    if (out_dir) {
      std::filesystem::create_directories(*out_dir);
      std::ofstream(*out_dir / "log.jsonl", std::ios::trunc);
    }
    const auto data = prepare_all(vocab, model.config(), train);
    auto params = model.params().raw();
    diff::AdamState adam;
    adam.config.lr = lr;
    TrainResult result;
    auto snap = [&](int epoch, const EpochLog& e) {
      auto c = model::snapshot(model, vocab, seed, corpus_hash, stage);
      c.metadata["epoch"] = epoch;
      c.metadata["val_ppl"] = e.val_ppl;
      return c;
    };
    double best_ppl = std::numeric_limits<double>::infinity();
    if (epochs == 0) {
      EpochLog e{0, 0.0, eval::perplexity(model, vocab, valid), validation_hits(), 0.0, seed};
      result.best = snap(0, e);
      result.log.push_back(e);
    }
    for (int epoch = 1; epoch <= epochs; ++epoch) {
      const auto start = std::chrono::steady_clock::now();
      std::vector<std::size_t> order(data.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle_rng({seed, static_cast<std::uint64_t>(epoch), 0x5348ULL});
      shuffle_rng.shuffle(order);
      double loss_sum = 0.0;
      for (std::size_t b = 0; b * batch_size < order.size(); ++b) {
        const std::size_t lo = b * batch_size, hi = std::min(order.size(), lo + batch_size);
        for (auto* p : params) {
          p->zero_grad();
        }
        Rng drop_rng({seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b), 0x4452ULL});
        for (std::size_t i = lo; i < hi; ++i) {
          const auto& ex = data[order[i]];
          diff::Graph g;
          Pass pass{g, model.config().dropout, &drop_rng};
          const auto loss = example_objective(pass, model, ex.input, ex.response, settings);
          loss_sum += loss.objective.item();
          g.accumulate_backward(loss.objective, 1.0 / static_cast<double>(hi - lo));
        }
        diff::clip_grad_norm(params, clip_norm);
        diff::adam_step(params, adam);
      }

      EpochLog e;
      e.epoch = epoch;
      e.seed = seed;
      e.train_loss = loss_sum / static_cast<double>(data.size());
      e.val_ppl = eval::perplexity(model, vocab, valid);
      e.val_hits1 = validation_hits();
      e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(e);
      if (after_epoch) {
        after_epoch(epoch);
      }
      if (out_dir) {
        write_log_line(*out_dir, e, false);
        if (keep_epoch_checkpoints) {
          model::save_checkpoint(snap(epoch, e), *out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"));
        }
      }
      if (e.val_ppl < best_ppl) {
        best_ppl = e.val_ppl;
        result.best = snap(epoch, e);
        result.best_epoch = epoch;
      }
      if (on_epoch) {
        on_epoch(e);
      }
    }
    if (out_dir) {
      model::save_checkpoint(result.best, *out_dir / "best.ckpt");
    }
    return result;
  }
};

// Copies same-named, same-shaped parameters from `source`.
inline std::size_t copy_matching(model::PersonaModel& target, const Checkpoint& source) {
  std::size_t n = 0;
  for (const auto& p : source.params) {
    if (auto dst = target.params().find(p.name); dst && dst->shape() == p.value.shape()) {
      dst->value() = p.value;
      ++n;
    }
  }
  return n;
}

}  // namespace detail

// Trains one protocol. The approximator protocol needs the with_encoder
// checkpoint it starts from.
inline TrainResult run_training(const TrainPlan& plan, const Corpus& train, const Corpus& valid,
                                const std::optional<Checkpoint>& prerequisite = std::nullopt) {
  if (plan.epochs < 0) {
    throw ContractError("epochs must be >= 0");
  }
  std::unique_ptr<model::PersonaModel> m;
  Vocabulary vocab;
  std::string hash = corpus::corpus_hash(train);
  if (plan.protocol == Protocol::approximator) {
    if (!prerequisite) {
      throw PrerequisiteError("approximator protocol needs a completed with_encoder checkpoint");
    }
    if (prerequisite->stage != to_string(Protocol::with_encoder) ||
        prerequisite->config.detector_kind != DetectorKind::encoder) {
      throw PrerequisiteError("approximator protocol needs a with_encoder checkpoint, got stage '" +
                              prerequisite->stage + "'");
    }
    if (prerequisite->config.persona_mode != plan.persona_mode) {
      throw ContractError("with_encoder checkpoint was trained in persona mode " +
                          model::to_string(prerequisite->config.persona_mode) + ", plan asks for " +
                          model::to_string(plan.persona_mode));
    }
    vocab = prerequisite->vocabulary();
    TrainPlan arch = plan;
    arch.model = prerequisite->config;
    arch.model.dropout = plan.model.dropout;
    m = std::make_unique<model::PersonaModel>(model_config_for(arch, vocab.size()), plan.seed);
    detail::copy_matching(*m, *prerequisite);
    for (const auto& p : m->persona_encoder_parameters()) {
      p->set_frozen(true);
    }
  } else {
    vocab = corpus::build_vocab(train);
    m = std::make_unique<model::PersonaModel>(model_config_for(plan, vocab.size()), plan.seed);
  }
  detail::Loop loop{*m,
                    vocab,
                    train,
                    valid,
                    {plan.alpha, plan.joint_mle_for_detector, true},
                    plan.epochs,
                    plan.batch_size,
                    plan.lr,
                    plan.clip_norm,
                    plan.seed,
                    plan.val_hits_examples,
                    to_string(plan.protocol),
                    hash,
                    plan.out_dir,
                    plan.keep_epoch_checkpoints,
                    plan.on_epoch,
                    {}};
  return loop.run();
}

struct TransferPlan {
  int epochs = 3;
  double lr = 3e-4;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;
  std::size_t val_hits_examples = 200;
  std::optional<std::filesystem::path> out_dir;
  bool keep_epoch_checkpoints = true;
  std::function<void(const EpochLog&)> on_epoch;
};

// Fine-tunes detector and dialogue model on a persona-free corpus with the
// response likelihood only. Personas present in the corpus are ignored.
inline TrainResult transfer_finetune(const Checkpoint& source, const Corpus& train, const Corpus& valid,
                                     const TransferPlan& plan) {
  if (source.config.detector_kind != DetectorKind::approximator &&
      source.config.detector_kind != DetectorKind::generator) {
    throw ContractError("transfer needs an approximator or generator checkpoint, got detector_kind " +
                        model::to_string(source.config.detector_kind));
  }
  const Corpus train_free = corpus::without_personas(train), valid_free = corpus::without_personas(valid);
  if (plan.epochs == 0) {
    TrainResult r;
    r.best = source;
    r.best.stage = "transfer";
    r.best.metadata["epoch"] = 0;
    if (plan.out_dir) {
      std::filesystem::create_directories(*plan.out_dir);
      std::ofstream(*plan.out_dir / "log.jsonl", std::ios::trunc);
      model::save_checkpoint(r.best, *plan.out_dir / "best.ckpt");
    }
    return r;
  }
  const Vocabulary vocab = detail::union_vocab(source.vocabulary(), train_free);
  auto m = model::restore(source);
  Rng rows({plan.seed, 0x7472616eULL});
  m->extend_vocab(vocab.size(), rows);
  for (const auto& p : m->params().all()) {
    p->set_frozen(false);
  }
  auto c = m->config();
  detail::Loop loop{*m,
                    vocab,
                    train_free,
                    valid_free,
                    {c.alpha, true, false},
                    plan.epochs,
                    plan.batch_size,
                    plan.lr,
                    plan.clip_norm,
                    plan.seed,
                    plan.val_hits_examples,
                    "transfer",
                    corpus::corpus_hash(train_free),
                    plan.out_dir,
                    plan.keep_epoch_checkpoints,
                    plan.on_epoch,
                    {}};
  return loop.run();
}

}  // namespace persona::training
