#pragma once

#include <cmath>
#include <filesystem>
#include <set>

#include "persona/corpus/generator.hpp"
#include "persona/corpus/jsonl.hpp"

namespace persona::corpus {

struct Splits {
  Corpus train;
  Corpus valid;
  Corpus test;
};

// Contiguous split by dialogue id: the first round(n*train_frac) dialogues
// train, the next round(n*valid_frac) validate, the rest test.
inline Splits split_by_dialogue(const Corpus& corpus, double train_frac = 0.8, double valid_frac = 0.1) {
  if (train_frac <= 0.0 || valid_frac <= 0.0 || train_frac + valid_frac >= 1.0) {
    throw ContractError("split fractions must be positive and leave room for a test split");
  }
  std::set<int> ids;
  for (const auto& ex : corpus) {
    ids.insert(ex.dialogue_id);
  }
  const auto n = static_cast<double>(ids.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * train_frac));
  const auto n_valid = static_cast<std::size_t>(std::llround(n * valid_frac));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= ids.size()) {
    throw ContractError("corpus has " + std::to_string(ids.size()) + " dialogues, too few for a 3-way split");
  }
  std::map<int, int> part;
  std::size_t rank = 0;
  for (int id : ids) {
    part[id] = rank < n_train ? 0 : rank < n_train + n_valid ? 1 : 2;
    ++rank;
  }
  Splits s;
  for (const auto& ex : corpus) {
    (part[ex.dialogue_id] == 0 ? s.train : part[ex.dialogue_id] == 1 ? s.valid : s.test).push_back(ex);
  }
  return s;
}

inline Corpus without_personas(Corpus corpus) {
  for (auto& ex : corpus) {
    ex.self_persona.reset();
    ex.their_persona.reset();
  }
  return corpus;
}

// Contiguous split by dialogue id with explicit dialogue counts: the first
// n_train dialogues train, the next n_valid validate, the rest test.
inline Splits split_by_counts(const Corpus& corpus, std::size_t n_train, std::size_t n_valid) {
  std::set<int> ids;
  for (const auto& ex : corpus) {
    ids.insert(ex.dialogue_id);
  }
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= ids.size()) {
    throw ContractError("corpus has " + std::to_string(ids.size()) + " dialogues, too few for " +
                        std::to_string(n_train) + " train + " + std::to_string(n_valid) + " valid + test");
  }
  std::map<int, int> part;
  std::size_t rank = 0;
  for (int id : ids) {
    part[id] = rank < n_train ? 0 : rank < n_train + n_valid ? 1 : 2;
    ++rank;
  }
  Splits s;
  for (const auto& ex : corpus) {
    const int p = part[ex.dialogue_id];
    (p == 0 ? s.train : p == 1 ? s.valid : s.test).push_back(ex);
  }
  return s;
}

struct DatasetOptions {
  // Per-dialogue settings; n_dialogues is replaced by the split total.
  GeneratorOptions generator;
  int n_train_dialogues = 2000;
  int n_valid_dialogues = 200;
  int n_test_dialogues = 200;
  // Dialogues of the persona-free transfer corpus. They continue the
  // dialogue ids after the main corpus and share its seed.
  int n_persona_free_dialogues = 1000;

  int n_main_dialogues() const { return n_train_dialogues + n_valid_dialogues + n_test_dialogues; }
};

inline void validate(const DatasetOptions& o) {
  if (o.n_train_dialogues < 1 || o.n_valid_dialogues < 1 || o.n_test_dialogues < 1) {
    throw ContractError("n_train_dialogues, n_valid_dialogues and n_test_dialogues must be >= 1");
  }
  if (o.n_persona_free_dialogues < 10) {
    throw ContractError("n_persona_free_dialogues must be >= 10");
  }
  auto g = o.generator;
  g.n_dialogues = o.n_main_dialogues();
  validate(g);
}

inline GeneratorOptions main_generator(const DatasetOptions& o) {
  GeneratorOptions g = o.generator;
  g.n_dialogues = o.n_main_dialogues();
  return g;
}

inline GeneratorOptions persona_free_generator(const DatasetOptions& o) {
  GeneratorOptions g = o.generator;
  g.n_dialogues = o.n_persona_free_dialogues;
  g.first_dialogue_id = o.generator.first_dialogue_id + o.n_main_dialogues();
  return g;
}

struct Dataset {
  Splits splits;
  // Persona-free corpus with the hidden generating personas still attached.
  Corpus persona_free_hidden;

  Corpus persona_free() const { return without_personas(persona_free_hidden); }
};

inline Dataset generate_dataset(const PersonaSchema& schema, const DatasetOptions& o) {
  validate(o);
  return {split_by_counts(generate_corpus(schema, main_generator(o)), static_cast<std::size_t>(o.n_train_dialogues),
                          static_cast<std::size_t>(o.n_valid_dialogues)),
          generate_corpus(schema, persona_free_generator(o))};
}

inline constexpr const char* kCorpusFiles[] = {"train.jsonl", "valid.jsonl", "test.jsonl", "persona_free.jsonl"};

// Writes the four corpus files; returns the hash over all of them.
inline std::string write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_jsonl(d.splits.train, dir / "train.jsonl");
  save_jsonl(d.splits.valid, dir / "valid.jsonl");
  save_jsonl(d.splits.test, dir / "test.jsonl");
  const Corpus free = d.persona_free();
  save_jsonl(free, dir / "persona_free.jsonl");
  std::uint64_t h = fnv1a(to_jsonl(d.splits.train));
  h = fnv1a(to_jsonl(d.splits.valid), h);
  h = fnv1a(to_jsonl(d.splits.test), h);
  return hex64(fnv1a(to_jsonl(free), h));
}

}  // namespace persona::corpus
