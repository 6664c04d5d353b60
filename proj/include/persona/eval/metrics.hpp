#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "persona/corpus/dialogue.hpp"
#include "persona/corpus/sampling.hpp"
#include "persona/corpus/schema.hpp"
#include "persona/corpus/vocab.hpp"
#include "persona/error.hpp"

namespace persona::eval {

using corpus::Corpus;
using corpus::PersonaProfile;
using corpus::PersonaSchema;

// exp(total NLL / total tokens) from per-sequence NLL sums and lengths.
inline double pooled_perplexity(std::span<const double> nll_sums, std::span<const std::size_t> token_counts) {
  if (nll_sums.empty() || nll_sums.size() != token_counts.size()) {
    throw ContractError("perplexity: needs a non-empty set of scored sequences");
  }
  double nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < nll_sums.size(); ++i) {
    nll += nll_sums[i];
    tokens += token_counts[i];
  }
  if (tokens == 0) {
    throw ContractError("perplexity: no tokens");
  }
  return std::exp(nll / static_cast<double>(tokens));
}

// Perplexity from gold-token probabilities, one vector per sequence.
inline double perplexity_from_probabilities(const std::vector<std::vector<double>>& probs) {
  std::vector<double> sums;
  std::vector<std::size_t> counts;
  for (const auto& seq : probs) {
    double s = 0.0;
    for (double p : seq) {
      s -= std::log(p);
    }
    sums.push_back(s);
    counts.push_back(seq.size());
  }
  return pooled_perplexity(sums, counts);
}

// Unique over total bigrams, pooled over all responses. 0 without bigrams.
inline double distinct2(const std::vector<std::vector<std::string>>& responses) {
  std::set<std::pair<std::string, std::string>> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    for (std::size_t i = 0; i + 1 < r.size(); ++i) {
      unique.emplace(r[i], r[i + 1]);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

inline double distinct2(const std::vector<std::string>& responses) {
  std::vector<std::vector<std::string>> tokens;
  for (const auto& r : responses) {
    tokens.push_back(corpus::tokenize(r));
  }
  return distinct2(tokens);
}

// Scores candidates for example `index`; candidates[0] is the gold response.
using CandidateScorer = std::function<std::vector<double>(std::size_t index, const std::vector<std::string>& candidates)>;

// Gold strictly above every distractor; ties are misses.
inline bool gold_ranks_first(std::span<const double> scores) {
  if (scores.empty()) {
    throw ContractError("hits_at_1: no candidate scores");
  }
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (!(scores[0] > scores[i])) {
      return false;
    }
  }
  return true;
}

// Gold first, then k distractors from `test_set`.
inline std::vector<std::string> candidate_set(const Corpus& test_set, std::size_t index, std::size_t k,
                                              std::uint64_t seed) {
  std::vector<std::string> c{test_set[index].response};
  for (auto& d : corpus::sample_distractors(test_set, index, k, seed)) {
    c.push_back(std::move(d));
  }
  return c;
}

inline double hits_at_1(const Corpus& test_set, const CandidateScorer& scorer, std::size_t k = 19,
                        std::uint64_t seed = 0) {
  if (test_set.empty()) {
    throw ContractError("hits_at_1: empty test set");
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto candidates = candidate_set(test_set, i, k, seed);
    const auto scores = scorer(i, candidates);
    if (scores.size() != candidates.size()) {
      throw ContractError("hits_at_1: scorer returned " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(candidates.size()) + " candidates");
    }
    hits += gold_ranks_first(scores) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(test_set.size());
}

// Splits text into sentences at "." tokens; special tokens are dropped.
inline std::vector<std::string> persona_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (const auto& tok : corpus::tokenize(text)) {
    if (tok.size() > 2 && tok.front() == '<' && tok.back() == '>') {
      continue;
    }
    current += current.empty() ? tok : " " + tok;
    if (tok == ".") {
      out.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) {
    out.push_back(std::move(current));
  }
  return out;
}

enum class NliVerdict : int { contradict = -1, neutral = 0, entail = 1 };

// Template oracle: does any sentence of `utterance` assert the persona
// sentence's slot for the speaker, with the same value (entail) or another
// one (contradict)?
inline NliVerdict nli_oracle(std::string_view utterance, std::string_view persona_sentence,
                             const PersonaSchema& schema) {
  const auto p = schema.parse_persona_sentence(persona_sentence);
  if (!p) {
    throw ContractError("nli_oracle: persona sentence does not match any persona template: \"" +
                        std::string(persona_sentence) + "\"");
  }
  bool entails = false, contradicts = false;
  for (const auto& sentence : persona_sentences(utterance)) {
    for (const auto& a : schema.assertions(sentence)) {
      if (a.slot == p->slot && a.role == corpus::Role::self) {
        (a.value == p->value ? entails : contradicts) = true;
      }
    }
  }
  if (entails) {
    return NliVerdict::entail;
  }
  return contradicts ? NliVerdict::contradict : NliVerdict::neutral;
}

inline int consistency(std::string_view response, const PersonaProfile& persona, const PersonaSchema& schema) {
  int total = 0;
  for (const auto& s : persona.sentences) {
    total += static_cast<int>(nli_oracle(response, s, schema));
  }
  return total;
}

// Fraction of revealed slots whose gold value some generated sentence
// asserts through a template of that slot. Absent when nothing is revealed.
inline std::optional<double> slot_recovery(std::string_view generated, const PersonaProfile& gold,
                                           const std::set<std::string>& revealed, const PersonaSchema& schema) {
  if (revealed.empty()) {
    return std::nullopt;
  }
  std::set<std::pair<std::size_t, std::string>> asserted;
  for (const auto& sentence : persona_sentences(generated)) {
    for (const auto& a : schema.assertions(sentence)) {
      if (a.role == corpus::Role::self) {
        asserted.emplace(a.slot, a.value);
      }
    }
  }
  std::size_t hit = 0;
  for (const auto& name : revealed) {
    const auto s = schema.slot_index(name);
    const auto it = gold.assignments.find(name);
    if (s && it != gold.assignments.end() && asserted.contains({*s, it->second})) {
      ++hit;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(revealed.size());
}

}  // namespace persona::eval
