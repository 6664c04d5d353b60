#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "persona/corpus/dialogue.hpp"
#include "persona/corpus/schema.hpp"
#include "persona/error.hpp"
#include "persona/util/rng.hpp"

namespace persona::corpus {

struct GeneratorOptions {
  int n_dialogues = 2000;
  int turns_per_dialogue = 8;
  double p_generic = 0.3;
  // Chance of reacting to a slot the partner revealed in the previous turn.
  double p_react = 0.5;
  // Chance that a slot takes its persona's archetype value instead of a
  // uniform draw. Correlated slots make unrevealed attributes partially
  // predictable from revealed ones.
  double persona_coherence = 0.7;
  std::uint64_t seed = 1;
  int first_dialogue_id = 0;
};

inline void validate(const GeneratorOptions& o) {
  if (o.n_dialogues < 1) {
    throw ContractError("generate_corpus: n_dialogues must be >= 1");
  }
  if (o.turns_per_dialogue < 4 || o.turns_per_dialogue % 2 != 0) {
    throw ContractError("generate_corpus: turns_per_dialogue must be even and >= 4");
  }
  if (!(o.p_generic >= 0.0 && o.p_generic < 1.0)) {
    throw ContractError("generate_corpus: p_generic must lie in [0, 1)");
  }
  if (!(o.p_react >= 0.0 && o.p_react <= 1.0)) {
    throw ContractError("generate_corpus: p_react must lie in [0, 1]");
  }
  if (!(o.persona_coherence >= 0.0 && o.persona_coherence <= 1.0)) {
    throw ContractError("generate_corpus: persona_coherence must lie in [0, 1]");
  }
}

namespace detail {

// Value indices per slot for the two speakers; never equal within a slot.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> sample_persona_pair(const PersonaSchema& schema,
                                                                                        double coherence, Rng& rng) {
  std::vector<std::size_t> a, b;
  std::size_t max_values = 0;
  for (const auto& s : schema.slots()) {
    max_values = std::max(max_values, s.values.size());
  }
  const std::size_t arch_a = rng.below(max_values);
  std::size_t arch_b = rng.below(max_values - 1);
  if (arch_b >= arch_a) {
    ++arch_b;
  }
  auto pick = [&](std::size_t archetype, std::size_t n) {
    if (archetype < n && rng.bernoulli(coherence)) {
      return archetype;
    }
    return rng.below(n);
  };
  for (const auto& s : schema.slots()) {
    const std::size_t n = s.values.size();
    const std::size_t va = pick(arch_a, n);
    std::size_t vb = pick(arch_b, n);
    if (vb == va) {
      vb = rng.below(n - 1);
      if (vb >= va) {
        ++vb;
      }
    }
    a.push_back(va);
    b.push_back(vb);
  }
  return {a, b};
}

template <typename T>
const T& pick_one(const std::vector<T>& items, Rng& rng) {
  return items[rng.below(items.size())];
}

}  // namespace detail

// Synthetic persona chat. Per turn: react (with p_react) when the partner's
// previous turn revealed a slot; otherwise a generic line (with p_generic,
// or when every own slot is already revealed); otherwise reveal a random
// not-yet-revealed own slot. One example per turn index >= 2.
inline Corpus generate_corpus(const PersonaSchema& schema, const GeneratorOptions& options) {
  validate(options);
  Corpus out;
  const std::size_t n_slots = schema.slot_count();
  for (int d = 0; d < options.n_dialogues; ++d) {
    const int dialogue_id = options.first_dialogue_id + d;
    Rng rng({options.seed, static_cast<std::uint64_t>(dialogue_id)});
    const auto [va, vb] = detail::sample_persona_pair(schema, options.persona_coherence, rng);
    std::map<std::string, std::string> assign_a, assign_b;
    for (std::size_t s = 0; s < n_slots; ++s) {
      assign_a[schema.slot(s).name] = schema.slot(s).values[va[s]];
      assign_b[schema.slot(s).name] = schema.slot(s).values[vb[s]];
    }
    const PersonaProfile persona_a = PersonaProfile::from_assignments(schema, assign_a);
    const PersonaProfile persona_b = PersonaProfile::from_assignments(schema, assign_b);

    std::vector<Utterance> turns;
    std::set<std::string> revealed_a, revealed_b;
    std::optional<std::size_t> previous_reveal;
    for (int t = 1; t <= options.turns_per_dialogue; ++t) {
      const Speaker speaker = t % 2 == 1 ? Speaker::a : Speaker::b;
      const auto& own_values = speaker == Speaker::a ? va : vb;
      const auto& partner_values = speaker == Speaker::a ? vb : va;
      auto& own_revealed = speaker == Speaker::a ? revealed_a : revealed_b;

      if (t >= 2) {
        DialogueExample ex;
        ex.dialogue_id = dialogue_id;
        ex.turn_index = t;
        ex.history = turns;
        ex.self_persona = speaker == Speaker::a ? persona_a : persona_b;
        ex.their_persona = speaker == Speaker::a ? persona_b : persona_a;
        ex.revealed_self = own_revealed;
        ex.revealed_their = speaker == Speaker::a ? revealed_b : revealed_a;
        out.push_back(std::move(ex));
      }

      std::vector<std::size_t> unrevealed;
      for (std::size_t s = 0; s < n_slots; ++s) {
        if (!own_revealed.contains(schema.slot(s).name)) {
          unrevealed.push_back(s);
        }
      }
      std::string text;
      std::optional<std::size_t> revealed_now;
      if (previous_reveal && rng.bernoulli(options.p_react)) {
        const SlotSpec& spec = schema.slot(*previous_reveal);
        text = render(detail::pick_one(spec.react_templates, rng), spec.values[partner_values[*previous_reveal]]);
      } else if (unrevealed.empty() || rng.bernoulli(options.p_generic)) {
        text = detail::pick_one(schema.generic_utterances(), rng);
      } else {
        const std::size_t s = detail::pick_one(unrevealed, rng);
        const SlotSpec& spec = schema.slot(s);
        text = render(detail::pick_one(spec.reveal_templates, rng), spec.values[own_values[s]]);
        own_revealed.insert(spec.name);
        revealed_now = s;
      }
      if (t >= 2) {
        out.back().response = text;
      }
      turns.push_back({speaker, text});
      previous_reveal = revealed_now;
    }
  }
  return out;
}

}  // namespace persona::corpus
