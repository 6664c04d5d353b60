#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "persona/corpus/dialogue.hpp"
#include "persona/error.hpp"

namespace persona::corpus {

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) {
    out.push_back(tok);
  }
  return out;
}

// Word-level vocabulary. Ids 0..6 are reserved and fixed.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  static constexpr int kSpkA = 5;
  static constexpr int kSpkB = 6;
  static constexpr int kReserved = 7;

  Vocabulary() {
    for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "<spk_a>", "<spk_b>"}) {
      add(t);
    }
  }

  // Reserved tokens first, then `words` in the given order (duplicates and
  // reserved spellings skipped).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary v;
    for (const auto& t : tokens) {
      v.add(t);
    }
    return v;
  }

  int add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) {
      return it->second;
    }
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return index_.contains(token); }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("vocabulary id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) {
      ids.push_back(id(t));
    }
    return ids;
  }

  // Skips PAD/BOS, stops at EOS; other special ids are spelled out.
  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kEos) {
        break;
      }
      if (id == kPad || id == kBos) {
        continue;
      }
      if (!out.empty()) {
        out += ' ';
      }
      out += token(id);
    }
    return out;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

// All words of histories, responses and personas, sorted.
inline Vocabulary build_vocab(const Corpus& corpus) {
  std::set<std::string> words;
  auto take = [&](const std::string& text) {
    for (auto& t : tokenize(text)) {
      words.insert(std::move(t));
    }
  };
  for (const auto& ex : corpus) {
    for (const auto& u : ex.history) {
      take(u.text);
    }
    take(ex.response);
    for (const auto* p : {&ex.self_persona, &ex.their_persona}) {
      if (p->has_value()) {
        for (const auto& s : (*p)->sentences) {
          take(s);
        }
      }
    }
  }
  return Vocabulary::from_tokens({words.begin(), words.end()});
}

// Encoder input for a history: BOS, then each utterance as speaker tag +
// words, utterances joined by SEP, closed by SEP and the responder's tag.
inline std::vector<int> history_stream(const Vocabulary& vocab, const std::vector<Utterance>& history, Speaker responder) {
  std::vector<int> ids{Vocabulary::kBos};
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (i > 0) {
      ids.push_back(Vocabulary::kSep);
    }
    ids.push_back(history[i].speaker == Speaker::a ? Vocabulary::kSpkA : Vocabulary::kSpkB);
    const auto words = vocab.encode(history[i].text);
    ids.insert(ids.end(), words.begin(), words.end());
  }
  ids.push_back(Vocabulary::kSep);
  ids.push_back(responder == Speaker::a ? Vocabulary::kSpkA : Vocabulary::kSpkB);
  return ids;
}

// Persona sentences joined by SEP, no BOS/EOS.
inline std::vector<int> persona_stream(const Vocabulary& vocab, const std::vector<std::string>& sentences) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i > 0) {
      ids.push_back(Vocabulary::kSep);
    }
    const auto words = vocab.encode(sentences[i]);
    ids.insert(ids.end(), words.begin(), words.end());
  }
  return ids;
}

// Splits decoded persona text back into sentences at SEP.
inline std::vector<std::string> split_persona_text(const Vocabulary& vocab, std::span<const int> ids) {
  std::vector<std::string> out;
  std::vector<int> current;
  for (int id : ids) {
    if (id == Vocabulary::kEos) {
      break;
    }
    if (id == Vocabulary::kSep) {
      out.push_back(vocab.decode(current));
      current.clear();
      continue;
    }
    current.push_back(id);
  }
  if (!current.empty()) {
    out.push_back(vocab.decode(current));
  }
  return out;
}

}  // namespace persona::corpus
