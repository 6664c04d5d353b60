#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "persona/corpus/schema.hpp"

namespace persona::corpus {

enum class Speaker { a, b };

inline Speaker other(Speaker s) { return s == Speaker::a ? Speaker::b : Speaker::a; }

inline std::string speaker_tag(Speaker s) { return s == Speaker::a ? "SPK_A" : "SPK_B"; }

struct PersonaProfile {
  // slot name -> value; empty when the sentences do not parse against the
  // schema (external corpora).
  std::map<std::string, std::string> assignments;
  std::vector<std::string> sentences;

  bool operator==(const PersonaProfile&) const = default;

  // Profile rendered in schema slot order.
  static PersonaProfile from_assignments(const PersonaSchema& schema, const std::map<std::string, std::string>& values) {
    PersonaProfile p;
    p.assignments = values;
    for (std::size_t s = 0; s < schema.slot_count(); ++s) {
      const auto& name = schema.slot(s).name;
      if (auto it = values.find(name); it != values.end()) {
        p.sentences.push_back(schema.persona_sentence(s, it->second));
      }
    }
    return p;
  }

  // Profile from raw sentences; assignments filled for sentences that parse.
  static PersonaProfile from_sentences(const PersonaSchema& schema, std::vector<std::string> sentences) {
    PersonaProfile p;
    p.sentences = std::move(sentences);
    for (const auto& s : p.sentences) {
      if (auto a = schema.parse_persona_sentence(s)) {
        p.assignments[schema.slot(a->slot).name] = a->value;
      }
    }
    return p;
  }
};

struct Utterance {
  Speaker speaker = Speaker::a;
  std::string text;

  bool operator==(const Utterance&) const = default;
};

struct DialogueExample {
  int dialogue_id = 0;
  int turn_index = 0;  // 1-based index of the response turn
  std::vector<Utterance> history;
  std::optional<PersonaProfile> self_persona;
  std::optional<PersonaProfile> their_persona;
  std::string response;
  std::set<std::string> revealed_self;
  std::set<std::string> revealed_their;

  // The responder is whoever did not speak last.
  Speaker responder() const { return history.empty() ? Speaker::a : other(history.back().speaker); }

  bool has_personas() const { return self_persona.has_value() && their_persona.has_value(); }

  bool operator==(const DialogueExample&) const = default;
};

using Corpus = std::vector<DialogueExample>;

}  // namespace persona::corpus
