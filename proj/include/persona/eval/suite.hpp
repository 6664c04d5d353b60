#pragma once

#include <cstdio>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/corpus/sampling.hpp"
#include "persona/diff/ops.hpp"
#include "persona/eval/metrics.hpp"
#include "persona/model/checkpoint.hpp"
#include "persona/model/model.hpp"

namespace persona::eval {

using diff::Tensor;
using model::PersonaModel;
using model::Target;

enum class Split { full, first_half, second_half };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::full:
      return "full";
    case Split::first_half:
      return "first_half";
    case Split::second_half:
      return "second_half";
  }
  return "full";
}

inline Split parse_split(std::string_view s) {
  for (Split v : {Split::full, Split::first_half, Split::second_half}) {
    if (to_string(v) == s) {
      return v;
    }
  }
  throw ContractError("unknown split '" + std::string(s) + "' (full|first_half|second_half)");
}

// Gold response NLL (sum over tokens incl. EOS) and token count.
struct ResponseNll {
  double nll = 0.0;
  std::size_t tokens = 0;
};

inline ResponseNll response_nll(const PersonaModel& m, const model::Vocabulary& vocab, const corpus::DialogueExample& ex,
                                const Tensor* memory = nullptr) {
  const auto in = model::prepare_input(vocab, m.config(), ex);
  const Tensor mem = memory != nullptr ? *memory : m.inference_memory(in);
  const auto ids = vocab.encode(ex.response);
  const double mean_logp = m.score_with_memory(mem, ids);
  return {-mean_logp * static_cast<double>(ids.size() + 1), ids.size() + 1};
}

inline double perplexity(const PersonaModel& m, const model::Vocabulary& vocab, const Corpus& examples) {
  if (examples.empty()) {
    throw ContractError("perplexity: empty example set");
  }
  std::vector<double> sums;
  std::vector<std::size_t> counts;
  for (const auto& ex : examples) {
    const auto r = response_nll(m, vocab, ex);
    sums.push_back(r.nll);
    counts.push_back(r.tokens);
  }
  return pooled_perplexity(sums, counts);
}

// Model-backed candidate scorer over `test_set`.
inline CandidateScorer model_scorer(const PersonaModel& m, const model::Vocabulary& vocab, const Corpus& test_set) {
  return [&m, &vocab, &test_set](std::size_t index, const std::vector<std::string>& candidates) {
    std::vector<std::vector<int>> ids;
    for (const auto& c : candidates) {
      ids.push_back(vocab.encode(c));
    }
    return m.score_candidates(model::prepare_input(vocab, m.config(), test_set[index]), ids);
  };
}

// The persona decoder reported by slot recovery: self when present.
inline std::optional<Target> recovery_target(const PersonaModel& m) {
  for (Target t : {Target::self, Target::their}) {
    if (m.has_persona_decoder(t)) {
      return t;
    }
  }
  return std::nullopt;
}

inline std::string greedy_persona_text(const PersonaModel& m, const model::Vocabulary& vocab,
                                       std::span<const int> history, Target t) {
  const auto ids = m.greedy_persona(history, t);
  return vocab.decode(ids);
}

struct ExampleResult {
  double nll = 0.0;
  std::size_t tokens = 0;
  bool hit = false;
  std::string generated;
  std::optional<int> cons;
  std::optional<double> slot_recovery;
};

struct EvalOptions {
  std::size_t k = 19;
  std::uint64_t seed = 0;
  bool hits = true;
  bool generate = true;
  bool recover_slots = true;
};

// Every per-example quantity, once per example (distractors from the
// whole `test_set`).
inline std::vector<ExampleResult> evaluate_examples(const PersonaModel& m, const model::Vocabulary& vocab,
                                                    const Corpus& test_set, const EvalOptions& options,
                                                    const PersonaSchema& schema = PersonaSchema::default_schema()) {
  std::vector<ExampleResult> out(test_set.size());
  const auto target = recovery_target(m);
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto& ex = test_set[i];
    const auto in = model::prepare_input(vocab, m.config(), ex);
    const Tensor mem = m.inference_memory(in);
    auto& r = out[i];
    const auto nll = response_nll(m, vocab, ex, &mem);
    r.nll = nll.nll;
    r.tokens = nll.tokens;
    if (options.hits) {
      std::vector<double> scores;
      for (const auto& c : candidate_set(test_set, i, options.k, options.seed)) {
        scores.push_back(m.score_with_memory(mem, vocab.encode(c)));
      }
      r.hit = gold_ranks_first(scores);
    }
    if (options.generate) {
      r.generated = vocab.decode(m.greedy_response(in));
      if (ex.self_persona) {
        r.cons = consistency(r.generated, *ex.self_persona, schema);
      }
    }
    if (options.recover_slots && target) {
      const auto& gold = *target == Target::self ? ex.self_persona : ex.their_persona;
      if (gold) {
        r.slot_recovery = slot_recovery(greedy_persona_text(m, vocab, in.history, *target), *gold,
                                        *target == Target::self ? ex.revealed_self : ex.revealed_their, schema);
      }
    }
  }
  return out;
}

struct EvalReport {
  std::string model_tag;
  std::string persona_mode;
  std::string split;
  double ppl = 0.0;
  double distinct2 = 0.0;
  double hits_at_1 = 0.0;
  std::optional<double> cons_mean;
  std::optional<double> slot_recovery;
  std::size_t n_examples = 0;
  std::uint64_t seed = 0;

  bool operator==(const EvalReport&) const = default;
};

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  return {{"model_tag", r.model_tag},   {"persona_mode", r.persona_mode}, {"split", r.split},
          {"ppl", r.ppl},               {"distinct2", r.distinct2},       {"hits_at_1", r.hits_at_1},
          {"cons_mean", opt(r.cons_mean)}, {"slot_recovery", opt(r.slot_recovery)},
          {"n_examples", r.n_examples}, {"seed", r.seed}};
}

inline nlohmann::ordered_json to_json(const std::vector<EvalReport>& reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    arr.push_back(to_json(r));
  }
  return arr;
}

// Aggregates the examples selected by `mask` (all when empty).
inline EvalReport aggregate(const std::vector<ExampleResult>& results, const std::vector<bool>& mask,
                            std::string tag, std::string mode, Split split, std::uint64_t seed) {
  EvalReport r;
  r.model_tag = std::move(tag);
  r.persona_mode = std::move(mode);
  r.split = to_string(split);
  r.seed = seed;
  std::vector<double> sums;
  std::vector<std::size_t> counts;
  std::vector<std::string> generated;
  std::size_t hits = 0, n_cons = 0, n_rec = 0;
  double cons = 0.0, rec = 0.0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!mask.empty() && !mask[i]) {
      continue;
    }
    const auto& e = results[i];
    sums.push_back(e.nll);
    counts.push_back(e.tokens);
    generated.push_back(e.generated);
    hits += e.hit ? 1 : 0;
    if (e.cons) {
      cons += *e.cons;
      ++n_cons;
    }
    if (e.slot_recovery) {
      rec += *e.slot_recovery;
      ++n_rec;
    }
  }
  r.n_examples = sums.size();
  if (r.n_examples == 0) {
    throw ContractError("evaluation split " + r.split + " is empty");
  }
  r.ppl = pooled_perplexity(sums, counts);
  r.distinct2 = distinct2(generated);
  r.hits_at_1 = static_cast<double>(hits) / static_cast<double>(r.n_examples);
  if (n_cons > 0) {
    r.cons_mean = cons / static_cast<double>(n_cons);
  }
  if (n_rec > 0) {
    r.slot_recovery = rec / static_cast<double>(n_rec);
  }
  return r;
}

inline std::vector<bool> split_mask(const Corpus& test_set, Split split) {
  if (split == Split::full) {
    return std::vector<bool>(test_set.size(), true);
  }
  auto mask = corpus::first_half_mask(test_set);
  if (split == Split::second_half) {
    mask.flip();
  }
  return mask;
}

struct NamedModel {
  std::string tag;
  std::shared_ptr<const PersonaModel> model;
  model::Vocabulary vocab;
};

inline NamedModel named_model(std::string tag, const model::Checkpoint& c) {
  return {std::move(tag), model::restore(c), c.vocabulary()};
}

// One report per (model, split), models in the outer loop.
inline std::vector<EvalReport> run_eval_suite(const std::vector<NamedModel>& models, const Corpus& test_set,
                                              const std::vector<Split>& splits, std::uint64_t seed,
                                              EvalOptions options = {}) {
  options.seed = seed;
  std::vector<EvalReport> reports;
  for (const auto& nm : models) {
    const auto results = evaluate_examples(*nm.model, nm.vocab, test_set, options);
    for (Split s : splits) {
      reports.push_back(aggregate(results, split_mask(test_set, s), nm.tag,
                                  model::to_string(nm.model->config().persona_mode), s, seed));
    }
  }
  return reports;
}

inline std::string format_table(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  auto opt = [](const std::optional<double>& v) {
    if (!v) {
      return std::string("-");
    }
    std::ostringstream s;
    s << std::fixed << std::setprecision(3) << *v;
    return s.str();
  };
  out << std::left << std::setw(28) << "model" << std::setw(9) << "mode" << std::setw(13) << "split" << std::right
      << std::setw(9) << "ppl" << std::setw(10) << "distinct2" << std::setw(8) << "hits@1" << std::setw(8) << "cons"
      << std::setw(9) << "slots" << std::setw(7) << "n" << "\n";
  for (const auto& r : reports) {
    out << std::left << std::setw(28) << r.model_tag << std::setw(9) << r.persona_mode << std::setw(13) << r.split
        << std::right << std::fixed << std::setprecision(3) << std::setw(9) << r.ppl << std::setw(10) << r.distinct2
        << std::setw(8) << r.hits_at_1 << std::setw(8) << opt(r.cons_mean) << std::setw(9) << opt(r.slot_recovery)
        << std::setw(7) << r.n_examples << "\n";
  }
  return out.str();
}

}  // namespace persona::eval
