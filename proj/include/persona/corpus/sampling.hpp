#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "persona/corpus/dialogue.hpp"
#include "persona/error.hpp"
#include "persona/util/rng.hpp"

namespace persona::corpus {

// k responses of other examples, drawn uniformly without replacement.
// Examples whose response text equals the gold are not eligible, so the
// gold never appears among its distractors. Deterministic in (seed, index).
inline std::vector<std::size_t> sample_distractor_ids(const Corpus& test_set, std::size_t index, std::size_t k,
                                                      std::uint64_t seed) {
  if (index >= test_set.size()) {
    throw ContractError("sample_distractors: example index out of range");
  }
  if (k + 1 > test_set.size()) {
    throw ContractError("sample_distractors: need " + std::to_string(k) + " distractors but the test set has only " +
                        std::to_string(test_set.size()) + " examples");
  }
  if (k == 0) {
    return {};
  }
  const std::string& gold = test_set[index].response;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    if (i != index && test_set[i].response != gold) {
      eligible.push_back(i);
    }
  }
  if (eligible.size() < k) {
    throw ContractError("sample_distractors: only " + std::to_string(eligible.size()) +
                        " examples with a response different from the gold");
  }
  Rng rng({seed, static_cast<std::uint64_t>(index)});
  // Partial Fisher-Yates over the eligible pool.
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
  }
  eligible.resize(k);
  return eligible;
}

inline std::vector<std::string> sample_distractors(const Corpus& test_set, std::size_t index, std::size_t k = 19,
                                                   std::uint64_t seed = 0) {
  std::vector<std::string> out;
  for (auto i : sample_distractor_ids(test_set, index, k, seed)) {
    out.push_back(test_set[i].response);
  }
  return out;
}

// Per dialogue, the earlier ceil(n/2) of its n examples (by turn index)
// are flagged true (first half), the rest false.
inline std::vector<bool> first_half_mask(const Corpus& examples) {
  std::map<int, std::vector<int>> turns;
  for (const auto& ex : examples) {
    turns[ex.dialogue_id].push_back(ex.turn_index);
  }
  std::map<int, int> cutoff;
  for (auto& [id, ts] : turns) {
    std::sort(ts.begin(), ts.end());
    cutoff[id] = ts[(ts.size() + 1) / 2 - 1];
  }
  std::vector<bool> mask;
  mask.reserve(examples.size());
  for (const auto& ex : examples) {
    mask.push_back(ex.turn_index <= cutoff[ex.dialogue_id]);
  }
  return mask;
}

// Input order is kept within each half.
inline std::pair<Corpus, Corpus> split_halves(const Corpus& examples) {
  const auto mask = first_half_mask(examples);
  Corpus first, second;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    (mask[i] ? first : second).push_back(examples[i]);
  }
  return {std::move(first), std::move(second)};
}

}  // namespace persona::corpus
