#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "persona/corpus/dialogue.hpp"
#include "persona/corpus/schema.hpp"
#include "persona/error.hpp"

// JSONL corpus files: one example per line with fields dialogue_id,
// turn_index, history ("SPK_A: ..." strings), self_persona, their_persona
// (string arrays or null), response, revealed_self, revealed_their.
namespace persona::corpus {

namespace detail {

inline nlohmann::ordered_json persona_json(const std::optional<PersonaProfile>& p) {
  if (!p) {
    return nullptr;
  }
  return p->sentences;
}

inline Utterance parse_history_entry(const std::string& entry, std::size_t line) {
  for (Speaker s : {Speaker::a, Speaker::b}) {
    const std::string prefix = speaker_tag(s) + ": ";
    if (entry.rfind(prefix, 0) == 0) {
      return {s, entry.substr(prefix.size())};
    }
  }
  throw ParseError("history entry without SPK_A:/SPK_B: tag: \"" + entry + "\"", line);
}

}  // namespace detail

inline std::string to_json_line(const DialogueExample& ex) {
  nlohmann::ordered_json j;
  j["dialogue_id"] = ex.dialogue_id;
  j["turn_index"] = ex.turn_index;
  auto& history = j["history"] = nlohmann::ordered_json::array();
  for (const auto& u : ex.history) {
    history.push_back(speaker_tag(u.speaker) + ": " + u.text);
  }
  j["self_persona"] = detail::persona_json(ex.self_persona);
  j["their_persona"] = detail::persona_json(ex.their_persona);
  j["response"] = ex.response;
  j["revealed_self"] = std::vector<std::string>(ex.revealed_self.begin(), ex.revealed_self.end());
  j["revealed_their"] = std::vector<std::string>(ex.revealed_their.begin(), ex.revealed_their.end());
  return j.dump();
}

inline DialogueExample from_json_line(const std::string& text, std::size_t line, const PersonaSchema& schema) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what(), line);
  }
  try {
    DialogueExample ex;
    ex.dialogue_id = j.at("dialogue_id").get<int>();
    ex.turn_index = j.at("turn_index").get<int>();
    for (const auto& h : j.at("history")) {
      ex.history.push_back(detail::parse_history_entry(h.get<std::string>(), line));
    }
    if (ex.history.empty()) {
      throw ParseError("history must contain at least one utterance", line);
    }
    for (auto [key, slot] : {std::pair{"self_persona", &ex.self_persona}, std::pair{"their_persona", &ex.their_persona}}) {
      const auto& v = j.at(key);
      if (!v.is_null()) {
        *slot = PersonaProfile::from_sentences(schema, v.get<std::vector<std::string>>());
      }
    }
    ex.response = j.at("response").get<std::string>();
    for (const auto& s : j.value("revealed_self", nlohmann::json::array())) {
      ex.revealed_self.insert(s.get<std::string>());
    }
    for (const auto& s : j.value("revealed_their", nlohmann::json::array())) {
      ex.revealed_their.insert(s.get<std::string>());
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad example: ") + e.what(), line);
  }
}

inline std::string to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& ex : corpus) {
    out += to_json_line(ex);
    out += '\n';
  }
  return out;
}

inline void save_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot write " + path.string());
  }
  const std::string text = to_jsonl(corpus);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) {
    throw std::runtime_error("write failed: " + path.string());
  }
}

inline Corpus load_jsonl(const std::filesystem::path& path,
                         const PersonaSchema& schema = PersonaSchema::default_schema()) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("cannot read " + path.string());
  }
  Corpus out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(f, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty()) {
      continue;
    }
    out.push_back(from_json_line(line, n, schema));
  }
  return out;
}

// 64-bit FNV-1a over bytes; used as the corpus content hash.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex;
  s.width(16);
  s.fill('0');
  s << v;
  return s.str();
}

inline std::string corpus_hash(const Corpus& corpus) { return hex64(fnv1a(to_jsonl(corpus))); }

}  // namespace persona::corpus
