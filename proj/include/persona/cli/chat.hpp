#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "persona/eval/metrics.hpp"
#include "persona/model/checkpoint.hpp"
#include "persona/model/model.hpp"

namespace persona::cli {

using corpus::Speaker;
using corpus::Utterance;
using model::DetectorKind;
using model::PersonaModel;
using model::Target;
using model::Vocabulary;

// Lower-cases and splits punctuation into separate tokens so typed text
// matches the corpus tokenization.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::ispunct(c) && ch != '\'' && ch != '<' && ch != '>' && ch != '_') {
      out += ' ';
      out += ch;
      out += ' ';
    } else {
      out += static_cast<char>(std::tolower(c));
    }
  }
  std::string joined;
  for (const auto& t : corpus::tokenize(out)) {
    joined += joined.empty() ? t : " " + t;
  }
  return joined;
}

// Parses utterances, one per entry. "SPK_A:" / "SPK_B:" (or "A:" / "B:")
// prefixes set the speaker; unprefixed entries alternate from SPK_A.
inline std::vector<Utterance> parse_history(const std::vector<std::string>& entries) {
  std::vector<Utterance> out;
  for (const auto& raw : entries) {
    std::string text = raw;
    std::optional<Speaker> speaker;
    for (const auto& [prefix, s] : std::vector<std::pair<std::string, Speaker>>{
             {"SPK_A:", Speaker::a}, {"SPK_B:", Speaker::b}, {"A:", Speaker::a}, {"B:", Speaker::b}}) {
      const auto start = text.find_first_not_of(' ');
      if (start != std::string::npos && text.compare(start, prefix.size(), prefix) == 0) {
        speaker = s;
        text = text.substr(start + prefix.size());
        break;
      }
    }
    text = normalize_text(text);
    if (text.empty()) {
      continue;
    }
    const Speaker next = out.empty() ? Speaker::a : corpus::other(out.back().speaker);
    out.push_back({speaker.value_or(next), text});
  }
  return out;
}

inline std::string format_vector(std::span<const double> v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    s << (i ? ", " : "") << v[i];
  }
  s << "]";
  return s.str();
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return aa == 0.0 || bb == 0.0 ? 0.0 : ab / std::sqrt(aa * bb);
}

struct SentenceMatch {
  std::string sentence;
  double cosine = 0.0;
};

// Best-matching schema persona sentence per slot under the persona encoder.
inline std::vector<SentenceMatch> nearest_persona_sentences(const PersonaModel& m, const Vocabulary& vocab,
                                                            std::span<const double> embedding,
                                                            const corpus::PersonaSchema& schema) {
  std::vector<SentenceMatch> best;
  for (std::size_t s = 0; s < schema.slot_count(); ++s) {
    SentenceMatch top{"", -2.0};
    for (const auto& value : schema.slot(s).values) {
      const auto sentence = schema.persona_sentence(s, value);
      const auto e = m.encode_persona(vocab.encode(sentence));
      const double c = cosine(embedding, e.values);
      if (c > top.cosine) {
        top = {sentence, c};
      }
    }
    best.push_back(top);
  }
  std::sort(best.begin(), best.end(), [](const auto& a, const auto& b) { return a.cosine > b.cosine; });
  return best;
}

struct PersonaReadout {
  Target target = Target::self;
  std::vector<double> embedding;
  std::optional<std::string> text;              // generator
  std::vector<SentenceMatch> nearest;           // approximator
};

inline std::vector<PersonaReadout> read_personas(const PersonaModel& m, const Vocabulary& vocab,
                                                 std::span<const int> history,
                                                 const corpus::PersonaSchema& schema) {
  std::vector<PersonaReadout> out;
  const auto kind = m.config().detector_kind;
  if (kind != DetectorKind::approximator && kind != DetectorKind::generator) {
    return out;
  }
  for (Target t : m.targets()) {
    PersonaReadout r;
    r.target = t;
    r.embedding = m.detect_persona(history, t).values;
    if (kind == DetectorKind::generator) {
      r.text = vocab.decode(m.greedy_persona(history, t));
    } else {
      r.nearest = nearest_persona_sentences(m, vocab, r.embedding, schema);
    }
    out.push_back(std::move(r));
  }
  return out;
}

// Interactive session: the user speaks as SPK_A, the model answers as SPK_B.
class ChatSession {
 public:
  ChatSession(std::shared_ptr<const PersonaModel> m, Vocabulary vocab,
              std::optional<corpus::PersonaProfile> self_persona = std::nullopt,
              const corpus::PersonaSchema& schema = corpus::PersonaSchema::default_schema())
      : model_(std::move(m)), vocab_(std::move(vocab)), self_(std::move(self_persona)), schema_(schema) {}

  const std::vector<Utterance>& history() const noexcept { return history_; }
  void reset() { history_.clear(); }

  // Encoder stream of the current history as the model sees it (at most
  // max_len tokens, cut from the left).
  model::ModelInput input() const {
    return model::prepare_input(vocab_, model_->config(), history_, Speaker::b, self_, std::nullopt);
  }

  std::string reply(std::string_view user_line) {
    const auto text = normalize_text(user_line);
    if (text.empty()) {
      throw ContractError("empty message");
    }
    history_.push_back({Speaker::a, text});
    const auto response = vocab_.decode(model_->greedy_response(input()));
    history_.push_back({Speaker::b, response});
    return response;
  }

  // One line per inferred persona; empty when the model has no detector.
  std::string persona_summary() const {
    std::ostringstream out;
    if (history_.empty()) {
      return "no history yet: nothing to infer a persona from\n";
    }
    const auto in = model::prepare_input(vocab_, model_->config(), history_, Speaker::a, std::nullopt, std::nullopt);
    for (const auto& r : read_personas(*model_, vocab_, in.history, schema_)) {
      out << "[" << label(r.target) << "] ";
      if (r.text) {
        out << (r.text->empty() ? "(empty)" : *r.text) << "\n";
      } else if (!r.nearest.empty()) {
        out << r.nearest.front().sentence << "\n";
      }
    }
    return out.str();
  }

  std::string persona_detail() const {
    std::ostringstream out;
    if (history_.empty()) {
      return "no history yet: nothing to infer a persona from\n";
    }
    const auto kind = model_->config().detector_kind;
    if (kind != DetectorKind::approximator && kind != DetectorKind::generator) {
      out << "this checkpoint has no persona detector (detector_kind " << model::to_string(kind) << ")\n";
      return out.str();
    }
    const auto in = model::prepare_input(vocab_, model_->config(), history_, Speaker::a, std::nullopt, std::nullopt);
    for (const auto& r : read_personas(*model_, vocab_, in.history, schema_)) {
      out << "[" << label(r.target) << "]\n";
      if (r.text) {
        out << "  decoded: " << *r.text << "\n";
      }
      for (const auto& n : r.nearest) {
        out << "  " << std::fixed << std::setprecision(3) << n.cosine << "  " << n.sentence << "\n";
      }
      out << "  embedding: " << format_vector(r.embedding) << "\n";
    }
    return out.str();
  }

 private:
  // Personas are read with the user as the next responder, so the self
  // target is the user and the their target is the model.
  static std::string label(Target t) {
    return t == Target::self ? "your persona (self, SPK_A)" : "model persona (their, SPK_B)";
  }

  std::shared_ptr<const PersonaModel> model_;
  Vocabulary vocab_;
  std::optional<corpus::PersonaProfile> self_;
  const corpus::PersonaSchema& schema_;
  std::vector<Utterance> history_;
};

}  // namespace persona::cli
