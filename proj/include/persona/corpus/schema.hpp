#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "persona/error.hpp"

namespace persona::corpus {

inline constexpr std::string_view kValuePlaceholder = "<VALUE>";

// Who a template speaks about: the speaker's own attribute, or the
// partner's.
enum class Role { self, partner };

enum class TemplateKind { persona, reveal, react };

struct SlotSpec {
  std::string name;
  std::vector<std::string> values;
  std::string persona_template;
  std::vector<std::string> reveal_templates;
  std::vector<std::string> react_templates;
};

// One template match: which slot, what value fills the placeholder.
struct Assertion {
  std::size_t slot = 0;
  std::string value;
  Role role = Role::self;
  TemplateKind kind = TemplateKind::reveal;
};

inline std::string render(std::string_view tmpl, std::string_view value) {
  std::string out(tmpl);
  const auto pos = out.find(kValuePlaceholder);
  if (pos == std::string::npos) {
    throw ContractError("template without placeholder: " + std::string(tmpl));
  }
  out.replace(pos, kValuePlaceholder.size(), value);
  return out;
}

// Matches the whole utterance against the template; returns the text in
// the placeholder position when it fits.
inline std::optional<std::string> match_template(std::string_view tmpl, std::string_view text) {
  const auto pos = tmpl.find(kValuePlaceholder);
  if (pos == std::string_view::npos) {
    return std::nullopt;
  }
  const std::string_view prefix = tmpl.substr(0, pos);
  const std::string_view suffix = tmpl.substr(pos + kValuePlaceholder.size());
  if (text.size() <= prefix.size() + suffix.size()) {
    return std::nullopt;
  }
  if (text.substr(0, prefix.size()) != prefix || text.substr(text.size() - suffix.size()) != suffix) {
    return std::nullopt;
  }
  std::string value(text.substr(prefix.size(), text.size() - prefix.size() - suffix.size()));
  if (value.empty() || value.find(' ') != std::string::npos) {
    return std::nullopt;
  }
  return value;
}

class PersonaSchema {
 public:
  PersonaSchema(std::vector<SlotSpec> slots, std::vector<std::string> generic)
      : slots_(std::move(slots)), generic_(std::move(generic)) {
    validate();
  }

  // hobby, pet, food, job, season with eight values each.
  static const PersonaSchema& default_schema();

  std::size_t slot_count() const noexcept { return slots_.size(); }
  const SlotSpec& slot(std::size_t i) const { return slots_.at(i); }
  const std::vector<SlotSpec>& slots() const noexcept { return slots_; }
  const std::vector<std::string>& generic_utterances() const noexcept { return generic_; }

  std::optional<std::size_t> slot_index(std::string_view name) const {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (slots_[i].name == name) {
        return i;
      }
    }
    return std::nullopt;
  }

  std::string persona_sentence(std::size_t slot, std::string_view value) const {
    return render(slots_.at(slot).persona_template, value);
  }

  // Parses a persona sentence back to (slot, value).
  std::optional<Assertion> parse_persona_sentence(std::string_view sentence) const {
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (auto v = match_template(slots_[s].persona_template, sentence)) {
        return Assertion{s, *v, Role::self, TemplateKind::persona};
      }
    }
    return std::nullopt;
  }

  // Every reading of an utterance across all templates of all slots.
  std::vector<Assertion> assertions(std::string_view utterance) const {
    std::vector<Assertion> out;
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      const SlotSpec& spec = slots_[s];
      if (auto v = match_template(spec.persona_template, utterance)) {
        out.push_back({s, *v, Role::self, TemplateKind::persona});
      }
      for (const auto& t : spec.reveal_templates) {
        if (auto v = match_template(t, utterance)) {
          out.push_back({s, *v, Role::self, TemplateKind::reveal});
        }
      }
      for (const auto& t : spec.react_templates) {
        if (auto v = match_template(t, utterance)) {
          out.push_back({s, *v, Role::partner, TemplateKind::react});
        }
      }
    }
    return out;
  }

 private:
  static bool well_formed(std::string_view text) {
    if (text.size() < 2 || text.substr(text.size() - 2) != " .") {
      return false;
    }
    for (char c : text) {
      if (c >= 'A' && c <= 'Z') {
        return false;
      }
    }
    return text.find("  ") == std::string_view::npos && text.front() != ' ';
  }

  static void check_template(std::string_view t, const std::string& slot) {
    const auto first = t.find(kValuePlaceholder);
    if (first == std::string_view::npos ||
        t.find(kValuePlaceholder, first + kValuePlaceholder.size()) != std::string_view::npos) {
      throw ContractError("slot " + slot + ": template needs exactly one placeholder: " + std::string(t));
    }
    if (!well_formed(render(t, "x"))) {
      throw ContractError("slot " + slot + ": template must be lowercase and end with \" .\": " + std::string(t));
    }
  }

  void validate() const {
    if (slots_.empty()) {
      throw ContractError("persona schema needs at least one slot");
    }
    for (const auto& s : slots_) {
      if (s.values.size() < 6) {
        throw ContractError("slot " + s.name + " needs at least 6 values");
      }
      if (s.reveal_templates.size() < 3 || s.react_templates.size() < 2) {
        throw ContractError("slot " + s.name + " needs >= 3 reveal and >= 2 react templates");
      }
      check_template(s.persona_template, s.name);
      for (const auto& t : s.reveal_templates) {
        check_template(t, s.name);
      }
      for (const auto& t : s.react_templates) {
        check_template(t, s.name);
      }
      for (const auto& v : s.values) {
        if (v.empty() || v.find(' ') != std::string::npos) {
          throw ContractError("slot " + s.name + ": values must be single lowercase tokens");
        }
      }
    }
    if (generic_.size() < 10) {
      throw ContractError("persona schema needs at least 10 generic utterances");
    }
    for (const auto& g : generic_) {
      if (g.find(kValuePlaceholder) != std::string::npos || !well_formed(g)) {
        throw ContractError("generic utterance must be placeholder-free, lowercase, period-terminated: " + g);
      }
    }
  }

  std::vector<SlotSpec> slots_;
  std::vector<std::string> generic_;
};

inline const PersonaSchema& PersonaSchema::default_schema() {
  static const PersonaSchema schema(
      {
          {"hobby",
           {"chess", "tennis", "guitar", "soccer", "poker", "golf", "piano", "basketball"},
           "i like playing <VALUE> .",
           {"i spend my weekends playing <VALUE> .", "i just got back from playing <VALUE> .",
            "my favorite hobby is <VALUE> ."},
           {"you play <VALUE> , that sounds like fun .", "i have always wanted to try <VALUE> ."}},
          {"pet",
           {"cat", "dog", "parrot", "hamster", "rabbit", "turtle", "goldfish", "lizard"},
           "i have a pet <VALUE> .",
           {"my <VALUE> is sleeping next to me right now .", "i just took my <VALUE> to the vet .",
            "i live with a very cute <VALUE> ."},
           {"a <VALUE> must be a great companion .", "i would love to meet your <VALUE> ."}},
          {"food",
           {"pizza", "sushi", "pasta", "tacos", "curry", "salad", "burgers", "noodles"},
           "my favorite food is <VALUE> .",
           {"i could eat <VALUE> every single day .", "i am cooking <VALUE> for dinner tonight .",
            "nothing beats a plate of <VALUE> ."},
           {"<VALUE> sounds delicious to me .", "you should share your <VALUE> with me ."}},
          {"job",
           {"teacher", "nurse", "chef", "pilot", "lawyer", "farmer", "baker", "plumber"},
           "i work as a <VALUE> .",
           {"i have been a <VALUE> for ten years .", "my job as a <VALUE> keeps me busy .",
            "being a <VALUE> pays the bills ."},
           {"being a <VALUE> sounds hard .", "i once thought about becoming a <VALUE> ."}},
          {"season",
           {"spring", "summer", "autumn", "winter", "christmas", "halloween", "easter", "thanksgiving"},
           "my favorite time of year is <VALUE> .",
           {"i always look forward to <VALUE> .", "<VALUE> makes me happy every year .",
            "i plan my whole year around <VALUE> ."},
           {"<VALUE> is a lovely time of year .", "what do you do during <VALUE> ."}},
      },
      {"that is really interesting .", "i am doing well today .", "tell me more about yourself .",
       "the weather is nice today .", "i just woke up from a nap .", "nice to meet you .", "i agree with you .",
       "that makes sense to me .", "i am not sure about that .", "what a great conversation .",
       "i was thinking the same thing .", "how has your week been going ."});
  return schema;
}

}  // namespace persona::corpus
