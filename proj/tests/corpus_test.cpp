#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "persona/corpus/generator.hpp"
#include "persona/corpus/jsonl.hpp"
#include "persona/corpus/sampling.hpp"
#include "persona/corpus/vocab.hpp"

namespace persona::corpus {
namespace {

const PersonaSchema& schema() { return PersonaSchema::default_schema(); }

GeneratorOptions small(int n = 50, std::uint64_t seed = 9) {
  GeneratorOptions o;
  o.n_dialogues = n;
  o.seed = seed;
  return o;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "persona_corpus_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

TEST(Schema, EveryRenderingParsesBackToItsSlotOnly) {
  for (std::size_t s = 0; s < schema().slot_count(); ++s) {
    const auto& spec = schema().slot(s);
    for (const auto& v : spec.values) {
      auto check = [&](const std::string& tmpl, Role role) {
        const auto found = schema().assertions(render(tmpl, v));
        ASSERT_EQ(found.size(), 1u) << render(tmpl, v);
        EXPECT_EQ(found[0].slot, s);
        EXPECT_EQ(found[0].value, v);
        EXPECT_EQ(found[0].role, role);
      };
      check(spec.persona_template, Role::self);
      for (const auto& t : spec.reveal_templates) {
        check(t, Role::self);
      }
      for (const auto& t : spec.react_templates) {
        check(t, Role::partner);
      }
    }
  }
  for (const auto& g : schema().generic_utterances()) {
    EXPECT_TRUE(schema().assertions(g).empty()) << g;
  }
  EXPECT_EQ(schema().slot(0).persona_template, "i like playing <VALUE> .");
}

TEST(Schema, RejectsMalformedTemplates) {
  auto spec = schema().slot(0);
  spec.reveal_templates[0] = "no placeholder here .";
  EXPECT_THROW(PersonaSchema({spec}, schema().generic_utterances()), ContractError);
  spec = schema().slot(0);
  spec.values.resize(5);
  EXPECT_THROW(PersonaSchema({spec}, schema().generic_utterances()), ContractError);
}

TEST(Generator, DeterministicInSeed) {
  EXPECT_EQ(to_jsonl(generate_corpus(schema(), small())), to_jsonl(generate_corpus(schema(), small())));
  EXPECT_NE(to_jsonl(generate_corpus(schema(), small(50, 9))), to_jsonl(generate_corpus(schema(), small(50, 10))));
}

TEST(Generator, RejectsInvalidParameters) {
  auto o = small();
  o.turns_per_dialogue = 5;
  EXPECT_THROW(generate_corpus(schema(), o), ContractError);
  o = small();
  o.turns_per_dialogue = 2;
  EXPECT_THROW(generate_corpus(schema(), o), ContractError);
  o = small();
  o.p_generic = 1.0;
  EXPECT_THROW(generate_corpus(schema(), o), ContractError);
  o = small();
  o.n_dialogues = 0;
  EXPECT_THROW(generate_corpus(schema(), o), ContractError);
}

TEST(Generator, StructuralInvariants) {
  const auto corpus = generate_corpus(schema(), small(200));
  ASSERT_EQ(corpus.size(), 200u * 7u);
  for (const auto& ex : corpus) {
    ASSERT_GE(ex.history.size(), 1u);
    EXPECT_EQ(static_cast<int>(ex.history.size()), ex.turn_index - 1);
    for (std::size_t i = 0; i < ex.history.size(); ++i) {
      EXPECT_EQ(ex.history[i].speaker, i % 2 == 0 ? Speaker::a : Speaker::b);
    }
    EXPECT_NE(ex.responder(), ex.history.back().speaker);
    ASSERT_TRUE(ex.has_personas());
    EXPECT_EQ(ex.self_persona->sentences.size(), schema().slot_count());
    for (std::size_t s = 0; s < schema().slot_count(); ++s) {
      const auto& name = schema().slot(s).name;
      EXPECT_EQ(ex.self_persona->sentences[s], schema().persona_sentence(s, ex.self_persona->assignments.at(name)));
      EXPECT_NE(ex.self_persona->assignments.at(name), ex.their_persona->assignments.at(name));
    }
  }
}

// Every revealed slot is recoverable by matching the speaker's own
// utterances in the history against the reveal templates.
TEST(Generator, RevealedSlotsRecoverableFromHistory) {
  const auto corpus = generate_corpus(schema(), small(200));
  for (const auto& ex : corpus) {
    std::set<std::string> self, their;
    for (const auto& u : ex.history) {
      for (const auto& a : schema().assertions(u.text)) {
        if (a.role != Role::self) {
          continue;
        }
        const auto& persona = u.speaker == ex.responder() ? *ex.self_persona : *ex.their_persona;
        EXPECT_EQ(persona.assignments.at(schema().slot(a.slot).name), a.value);
        (u.speaker == ex.responder() ? self : their).insert(schema().slot(a.slot).name);
      }
    }
    EXPECT_EQ(self, ex.revealed_self);
    EXPECT_EQ(their, ex.revealed_their);
  }
}

TEST(Generator, ExhaustionRevealsEverySlot) {
  auto o = small(100);
  o.p_generic = 0.0;
  o.p_react = 0.0;
  o.turns_per_dialogue = 2 * static_cast<int>(schema().slot_count());
  const auto corpus = generate_corpus(schema(), o);
  for (const auto& ex : corpus) {
    if (ex.turn_index != o.turns_per_dialogue) {
      continue;
    }
    // Last example: the responder's final slot is the one its response reveals.
    auto self = ex.revealed_self;
    for (const auto& a : schema().assertions(ex.response)) {
      self.insert(schema().slot(a.slot).name);
    }
    EXPECT_EQ(self.size(), schema().slot_count());
    EXPECT_EQ(ex.revealed_their.size(), schema().slot_count());
  }
}

// Exact expected react fraction by dynamic programming over the turn
// process (own revealed counts + whether the previous turn revealed).
double expected_react_fraction(int turns, int n_slots, double p_generic, double p_react) {
  std::map<std::tuple<int, int, bool>, double> state{{{0, 0, false}, 1.0}};
  double reacts = 0.0;
  for (int t = 1; t <= turns; ++t) {
    const bool a_speaks = t % 2 == 1;
    std::map<std::tuple<int, int, bool>, double> next;
    for (const auto& [key, p] : state) {
      auto [ca, cb, prev] = key;
      const int own = a_speaks ? ca : cb;
      const double react = prev ? p_react : 0.0;
      if (t >= 2) {
        reacts += p * react;
      }
      next[{ca, cb, false}] += p * react;
      const double rest = p * (1.0 - react);
      if (own == n_slots) {
        next[{ca, cb, false}] += rest;
      } else {
        next[{ca, cb, false}] += rest * p_generic;
        next[{a_speaks ? ca + 1 : ca, a_speaks ? cb : cb + 1, true}] += rest * (1.0 - p_generic);
      }
    }
    state = std::move(next);
  }
  return reacts / static_cast<double>(turns - 1);
}

TEST(Generator, ReactFractionMatchesExactEnumeration) {
  const auto corpus = generate_corpus(schema(), small(1000, 77));
  std::size_t reacts = 0;
  for (const auto& ex : corpus) {
    for (const auto& a : schema().assertions(ex.response)) {
      reacts += a.role == Role::partner ? 1 : 0;
    }
  }
  const double observed = static_cast<double>(reacts) / static_cast<double>(corpus.size());
  const double expected = expected_react_fraction(8, 5, 0.3, 0.5);
  EXPECT_NEAR(expected, 0.268868, 1e-6);
  EXPECT_NEAR(observed, expected, 0.02);
}

TEST(Generator, ReactsReferToPartnersPreviousReveal) {
  const auto corpus = generate_corpus(schema(), small(200));
  for (const auto& ex : corpus) {
    for (const auto& a : schema().assertions(ex.response)) {
      if (a.role != Role::partner) {
        continue;
      }
      const auto prev = schema().assertions(ex.history.back().text);
      ASSERT_EQ(prev.size(), 1u);
      EXPECT_EQ(prev[0].role, Role::self);
      EXPECT_EQ(prev[0].slot, a.slot);
      EXPECT_EQ(ex.their_persona->assignments.at(schema().slot(a.slot).name), a.value);
    }
  }
}

TEST(Distractors, CountDistinctnessDeterminism) {
  const auto corpus = generate_corpus(schema(), small(30));
  const auto ids = sample_distractor_ids(corpus, 5, 19, 42);
  ASSERT_EQ(ids.size(), 19u);
  EXPECT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 19u);
  for (auto i : ids) {
    EXPECT_NE(i, 5u);
    EXPECT_NE(corpus[i].response, corpus[5].response);
  }
  EXPECT_EQ(ids, sample_distractor_ids(corpus, 5, 19, 42));
  EXPECT_NE(ids, sample_distractor_ids(corpus, 5, 19, 43));
  EXPECT_TRUE(sample_distractors(corpus, 5, 0, 42).empty());
}

TEST(Distractors, NeverTheGold) {
  const auto corpus = generate_corpus(schema(), small(40));
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (const auto& d : sample_distractors(corpus, i, 19, 3)) {
      EXPECT_NE(d, corpus[i].response);
    }
  }
}

TEST(Distractors, TooSmallTestSet) {
  const auto corpus = generate_corpus(schema(), small(2));
  EXPECT_THROW(sample_distractors(corpus, 0, 19, 1), ContractError);
}

DialogueExample stub(int dialogue, int turn) {
  DialogueExample ex;
  ex.dialogue_id = dialogue;
  ex.turn_index = turn;
  ex.history = {{Speaker::a, "nice to meet you ."}};
  ex.response = "i agree with you .";
  return ex;
}

TEST(SplitHalves, Examples) {
  Corpus c{stub(1, 2), stub(1, 3), stub(1, 4), stub(1, 5), stub(2, 2)};
  auto [first, second] = split_halves(c);
  ASSERT_EQ(first.size(), 3u);
  ASSERT_EQ(second.size(), 2u);
  EXPECT_EQ(first[0].turn_index, 2);
  EXPECT_EQ(first[1].turn_index, 3);
  EXPECT_EQ(first[2].dialogue_id, 2);
  EXPECT_EQ(second[0].turn_index, 4);
  EXPECT_EQ(second[1].turn_index, 5);

  Corpus single{stub(7, 2)};
  auto [f1, s1] = split_halves(single);
  EXPECT_EQ(f1.size(), 1u);
  EXPECT_TRUE(s1.empty());
}

TEST(SplitHalves, PartitionsGeneratedCorpus) {
  const auto corpus = generate_corpus(schema(), small(20));
  auto [first, second] = split_halves(corpus);
  EXPECT_EQ(first.size() + second.size(), corpus.size());
  EXPECT_EQ(first.size(), 20u * 4u);
}

TEST(Vocabulary, RoundTripUnknownEmpty) {
  const auto corpus = generate_corpus(schema(), small(50));
  const auto vocab = build_vocab(corpus);
  EXPECT_EQ(vocab.token(Vocabulary::kPad), "<pad>");
  EXPECT_EQ(vocab.token(Vocabulary::kSpkB), "<spk_b>");
  EXPECT_EQ(vocab.decode(vocab.encode("i like playing chess .")), "i like playing chess .");
  EXPECT_EQ(vocab.encode("zyzzyva")[0], Vocabulary::kUnk);
  EXPECT_TRUE(vocab.encode("").empty());
  std::vector<int> ids{Vocabulary::kBos, vocab.id("nice"), Vocabulary::kPad, vocab.id("."), Vocabulary::kEos,
                       vocab.id("cat")};
  EXPECT_EQ(vocab.decode(ids), "nice .");
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    EXPECT_EQ(vocab.id(vocab.token(static_cast<int>(i))), static_cast<int>(i));
  }
}

TEST(Vocabulary, HistoryStreamLayout) {
  Vocabulary v = Vocabulary::from_tokens({"hi", "."});
  std::vector<Utterance> h{{Speaker::a, "hi ."}, {Speaker::b, "hi"}};
  const std::vector<int> expected{Vocabulary::kBos, Vocabulary::kSpkA, v.id("hi"), v.id("."), Vocabulary::kSep,
                                  Vocabulary::kSpkB, v.id("hi"), Vocabulary::kSep, Vocabulary::kSpkA};
  EXPECT_EQ(history_stream(v, h, Speaker::a), expected);
}

TEST(Jsonl, RoundTrip) {
  const auto corpus = generate_corpus(schema(), small(15));
  Corpus hundred(corpus.begin(), corpus.begin() + 100);
  const auto path = temp_file("round_trip.jsonl");
  save_jsonl(hundred, path);
  EXPECT_EQ(load_jsonl(path), hundred);
}

TEST(Jsonl, PersonaFreeLoadsWithoutPersonas) {
  auto corpus = generate_corpus(schema(), small(3));
  for (auto& ex : corpus) {
    ex.self_persona.reset();
    ex.their_persona.reset();
  }
  const auto path = temp_file("persona_free.jsonl");
  save_jsonl(corpus, path);
  std::ifstream f(path);
  std::string first;
  std::getline(f, first);
  EXPECT_NE(first.find("\"self_persona\":null"), std::string::npos);
  const auto loaded = load_jsonl(path);
  ASSERT_EQ(loaded.size(), corpus.size());
  EXPECT_FALSE(loaded[0].self_persona.has_value());
  EXPECT_FALSE(loaded[0].their_persona.has_value());
}

TEST(Jsonl, TruncatedLineNamesLineNumber) {
  const auto corpus = generate_corpus(schema(), small(5));
  std::string text = to_jsonl(corpus);
  // Cut line 17 in half.
  std::size_t pos = 0;
  for (int i = 0; i < 16; ++i) {
    pos = text.find('\n', pos) + 1;
  }
  const std::size_t end = text.find('\n', pos);
  text.erase(pos + (end - pos) / 2, end - pos - (end - pos) / 2);
  const auto path = temp_file("truncated.jsonl");
  std::ofstream(path, std::ios::binary) << text;
  try {
    load_jsonl(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 17u);
    EXPECT_NE(std::string(e.what()).find("line 17"), std::string::npos);
  }
}

TEST(Jsonl, HashIsStable) {
  const auto a = generate_corpus(schema(), small(20));
  EXPECT_EQ(corpus_hash(a), corpus_hash(generate_corpus(schema(), small(20))));
  EXPECT_EQ(corpus_hash(a).size(), 16u);
}

}  // namespace
}  // namespace persona::corpus
