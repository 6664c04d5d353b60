#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "persona/corpus/generator.hpp"
#include "persona/eval/metrics.hpp"
#include "persona/eval/suite.hpp"
#include "persona/model/model.hpp"
#include "persona/training/losses.hpp"

namespace persona::eval {
namespace {

const PersonaSchema& schema() { return PersonaSchema::default_schema(); }

const Corpus& sample_corpus() {
  static const Corpus c = [] {
    corpus::GeneratorOptions o;
    o.n_dialogues = 8;
    o.seed = 21;
    return corpus::generate_corpus(schema(), o);
  }();
  return c;
}

const model::Vocabulary& vocab() {
  static const model::Vocabulary v = corpus::build_vocab(sample_corpus());
  return v;
}

model::ModelConfig small_config(model::PersonaMode mode = model::PersonaMode::none,
                                model::DetectorKind kind = model::DetectorKind::none) {
  model::ModelConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.max_len = 96;
  c.vocab_size = vocab().size();
  c.persona_mode = mode;
  c.detector_kind = kind;
  c.dropout = 0.0;
  c.max_response_len = 8;
  return c;
}

PersonaProfile profile(std::map<std::string, std::string> values) {
  return PersonaProfile::from_assignments(schema(), values);
}

PersonaProfile full_profile() {
  return profile({{"hobby", "chess"}, {"pet", "dog"}, {"food", "pizza"}, {"job", "nurse"}, {"season", "winter"}});
}

// Perplexity

TEST(Perplexity, UniformModelEqualsVocabSize) {
  model::PersonaModel m(small_config(), 3);
  m.params().find("tok_emb")->value().fill(0.0);
  const Corpus subset(sample_corpus().begin(), sample_corpus().begin() + 12);
  EXPECT_NEAR(perplexity(m, vocab(), subset), static_cast<double>(vocab().size()), 1e-6);
}

TEST(Perplexity, HandComputedAndBounds) {
  EXPECT_NEAR(perplexity_from_probabilities({{0.5, 0.25}}), std::sqrt(8.0), 1e-12);
  EXPECT_DOUBLE_EQ(perplexity_from_probabilities({{1.0, 1.0}, {1.0}}), 1.0);
  // Token pooling, not a mean of per-sequence perplexities.
  EXPECT_NEAR(perplexity_from_probabilities({{0.5}, {0.25, 0.25, 0.25}}),
              std::exp((std::log(2.0) + 3.0 * std::log(4.0)) / 4.0), 1e-12);
  EXPECT_THROW(pooled_perplexity({}, {}), ContractError);
  EXPECT_THROW(perplexity(model::PersonaModel(small_config(), 1), vocab(), Corpus{}), ContractError);
}

TEST(Perplexity, EqualsExpMleWhenLengthsAgree) {
  model::PersonaModel m(small_config(), 4);
  Corpus same_len;
  for (const auto& ex : sample_corpus()) {
    if (corpus::tokenize(ex.response).size() == 6) {
      same_len.push_back(ex);
    }
  }
  ASSERT_GE(same_len.size(), 3u);
  double mle_sum = 0.0;
  for (const auto& ex : same_len) {
    diff::Graph g(false);
    model::Pass pass{g, 0.0, nullptr};
    const auto in = model::prepare_input(vocab(), m.config(), ex);
    const auto enc = m.encode_history(pass, in.history);
    mle_sum += training::mle_loss(pass, m, m.memory(pass, enc.context, std::nullopt, std::nullopt),
                                  vocab().encode(ex.response))
                   .item();
  }
  EXPECT_NEAR(perplexity(m, vocab(), same_len), std::exp(mle_sum / static_cast<double>(same_len.size())), 1e-9);
}

// Distinct-2

TEST(Distinct2, HandEnumeratedExample) {
  EXPECT_NEAR(distinct2(std::vector<std::string>{"i like cats .", "i like dogs ."}), 5.0 / 6.0, 1e-12);
}

TEST(Distinct2, RepetitionUniqueAndDegenerate) {
  for (std::size_t n : {1u, 2u, 5u}) {
    EXPECT_NEAR(distinct2(std::vector<std::string>(n, "a b c d e")), 1.0 / static_cast<double>(n), 1e-12);
  }
  EXPECT_DOUBLE_EQ(distinct2(std::vector<std::string>{"a b c", "d e f g"}), 1.0);
  EXPECT_DOUBLE_EQ(distinct2(std::vector<std::string>{"a", "", "b"}), 0.0);
  // Single-token responses contribute no bigrams.
  EXPECT_DOUBLE_EQ(distinct2(std::vector<std::string>{"a", "x y"}), 1.0);
}

TEST(Distinct2, InvariantToResponseOrder) {
  std::vector<std::string> r;
  for (std::size_t i = 0; i < 40; ++i) {
    r.push_back(sample_corpus()[i].response);
  }
  const double base = distinct2(r);
  std::mt19937 gen(3);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(r.begin(), r.end(), gen);
    EXPECT_DOUBLE_EQ(distinct2(r), base);
  }
}

// Hits@1

const Corpus& large_corpus() {
  static const Corpus c = [] {
    corpus::GeneratorOptions o;
    o.n_dialogues = 300;
    o.seed = 22;
    return corpus::generate_corpus(schema(), o);
  }();
  return c;
}

TEST(HitsAt1, OracleAndAdversarialScorers) {
  const Corpus subset(sample_corpus().begin(), sample_corpus().begin() + 30);
  const double inf = std::numeric_limits<double>::infinity();
  auto fixed_gold = [](double gold) {
    return CandidateScorer([gold](std::size_t, const std::vector<std::string>& c) {
      std::vector<double> s(c.size(), 0.0);
      s[0] = gold;
      return s;
    });
  };
  EXPECT_DOUBLE_EQ(hits_at_1(subset, fixed_gold(inf)), 1.0);
  EXPECT_DOUBLE_EQ(hits_at_1(subset, fixed_gold(-inf)), 0.0);
  // Ties are misses.
  EXPECT_DOUBLE_EQ(hits_at_1(subset, fixed_gold(0.0)), 0.0);
}

TEST(HitsAt1, RandomScorerNearOneInTwenty) {
  const auto& test = large_corpus();
  ASSERT_GE(test.size(), 2000u);
  const Corpus subset(test.begin(), test.begin() + 2000);
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const CandidateScorer random = [&](std::size_t, const std::vector<std::string>& c) {
    std::vector<double> s(c.size());
    for (auto& x : s) {
      x = u(gen);
    }
    return s;
  };
  const double h = hits_at_1(subset, random);
  EXPECT_GE(h, 0.03);
  EXPECT_LE(h, 0.07);
}

TEST(HitsAt1, InvariantUnderMonotoneTransform) {
  model::PersonaModel m(small_config(model::PersonaMode::self, model::DetectorKind::encoder), 5);
  const Corpus subset(sample_corpus().begin(), sample_corpus().begin() + 25);
  const auto base = model_scorer(m, vocab(), subset);
  const CandidateScorer transformed = [&](std::size_t i, const std::vector<std::string>& c) {
    auto s = base(i, c);
    for (auto& x : s) {
      x = std::exp(3.0 * x) + 7.0;
    }
    return s;
  };
  EXPECT_DOUBLE_EQ(hits_at_1(subset, base, 19, 4), hits_at_1(subset, transformed, 19, 4));
}

TEST(HitsAt1, ScorerSizeMismatchIsContractError) {
  const Corpus subset(sample_corpus().begin(), sample_corpus().begin() + 25);
  const CandidateScorer bad = [](std::size_t, const std::vector<std::string>&) { return std::vector<double>{1.0}; };
  EXPECT_THROW(hits_at_1(subset, bad), ContractError);
  EXPECT_THROW(hits_at_1(Corpus{}, bad), ContractError);
}

// NLI oracle and Cons

TEST(NliOracle, TemplateExamples) {
  EXPECT_EQ(nli_oracle("i like playing chess .", "i like playing chess .", schema()), NliVerdict::entail);
  EXPECT_EQ(nli_oracle("i like playing go .", "i like playing chess .", schema()), NliVerdict::contradict);
  for (const auto& s : full_profile().sentences) {
    EXPECT_EQ(nli_oracle("how are you ?", s, schema()), NliVerdict::neutral);
  }
  EXPECT_THROW(nli_oracle("hi .", "i enjoy long walks .", schema()), ContractError);
}

TEST(NliOracle, RevealTemplatesAndRoles) {
  EXPECT_EQ(nli_oracle("i just took my dog to the vet .", "i have a pet dog .", schema()), NliVerdict::entail);
  EXPECT_EQ(nli_oracle("i just took my cat to the vet .", "i have a pet dog .", schema()), NliVerdict::contradict);
  // A reaction asserts the partner's slot, not the speaker's.
  EXPECT_EQ(nli_oracle("i would love to meet your cat .", "i have a pet dog .", schema()), NliVerdict::neutral);
  // Other slots are irrelevant.
  EXPECT_EQ(nli_oracle("i work as a chef .", "i have a pet dog .", schema()), NliVerdict::neutral);
}

TEST(NliOracle, RangeOverCorpusUtterances) {
  const auto p = full_profile();
  for (const auto& ex : sample_corpus()) {
    for (const auto& s : p.sentences) {
      const int v = static_cast<int>(nli_oracle(ex.response, s, schema()));
      EXPECT_TRUE(v == -1 || v == 0 || v == 1);
    }
  }
}

TEST(Consistency, SumExamples) {
  const auto p = full_profile();
  EXPECT_EQ(consistency("i like playing chess . i have a pet cat .", p, schema()), 0);
  EXPECT_EQ(consistency("that is really interesting .", p, schema()), 0);
  EXPECT_EQ(consistency("i like playing chess . i work as a nurse .", p, schema()), 2);
  EXPECT_EQ(consistency("i like playing tennis . i work as a chef .", p, schema()), -2);
}

TEST(Consistency, AdditiveAndOrderInvariant) {
  const auto p = full_profile();
  for (const auto& ex : sample_corpus()) {
    const auto& u = ex.response;
    int sum = 0;
    for (const auto& s : p.sentences) {
      sum += static_cast<int>(nli_oracle(u, s, schema()));
    }
    EXPECT_EQ(consistency(u, p, schema()), sum);
    auto reversed = p;
    std::reverse(reversed.sentences.begin(), reversed.sentences.end());
    EXPECT_EQ(consistency(u, reversed, schema()), sum);
  }
}

// Slot recovery

TEST(SlotRecovery, RatioExamples) {
  const auto gold = full_profile();
  const std::set<std::string> revealed{"hobby", "pet", "food", "job"};
  const std::string all_right = "i like playing chess . i have a pet dog . my favorite food is pizza . i work as a nurse .";
  const std::string all_wrong = "i like playing golf . i have a pet cat . my favorite food is sushi . i work as a chef .";
  const std::string half = "i like playing chess . i have a pet cat . my favorite food is pizza . i work as a chef .";
  EXPECT_DOUBLE_EQ(*slot_recovery(all_right, gold, revealed, schema()), 1.0);
  EXPECT_DOUBLE_EQ(*slot_recovery(all_wrong, gold, revealed, schema()), 0.0);
  EXPECT_DOUBLE_EQ(*slot_recovery(half, gold, revealed, schema()), 0.5);
  EXPECT_FALSE(slot_recovery(all_right, gold, {}, schema()).has_value());
}

TEST(SlotRecovery, DecodedTextWithSpecialTokens) {
  const auto gold = full_profile();
  EXPECT_DOUBLE_EQ(*slot_recovery("i like playing chess . <sep> i have a pet dog . <eos>", gold, {"hobby", "pet"},
                                  schema()),
                   1.0);
  // The value must come through a template of the same slot.
  EXPECT_DOUBLE_EQ(*slot_recovery("chess dog pizza", gold, {"hobby", "pet"}, schema()), 0.0);
}

// Suite

std::vector<NamedModel> suite_models() {
  std::vector<NamedModel> models;
  models.push_back({"baseline", std::make_shared<model::PersonaModel>(small_config(), 7), vocab()});
  models.push_back({"generator",
                    std::make_shared<model::PersonaModel>(
                        small_config(model::PersonaMode::self, model::DetectorKind::generator), 8),
                    vocab()});
  return models;
}

TEST(EvalSuite, DeterministicAndCardinality) {
  const Corpus test(sample_corpus().begin(), sample_corpus().begin() + 24);
  const auto models = suite_models();
  const std::vector<Split> splits{Split::full, Split::first_half, Split::second_half};
  const auto a = run_eval_suite(models, test, splits, 5);
  const auto b = run_eval_suite(models, test, splits, 5);
  ASSERT_EQ(a.size(), models.size() * splits.size());
  EXPECT_EQ(a, b);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  for (const auto& r : a) {
    EXPECT_GE(r.ppl, 1.0);
    EXPECT_GE(r.distinct2, 0.0);
    EXPECT_LE(r.distinct2, 1.0);
    EXPECT_GE(r.hits_at_1, 0.0);
    EXPECT_LE(r.hits_at_1, 1.0);
    EXPECT_TRUE(r.cons_mean.has_value());
    if (r.slot_recovery) {
      EXPECT_GE(*r.slot_recovery, 0.0);
      EXPECT_LE(*r.slot_recovery, 1.0);
    }
  }
  EXPECT_FALSE(a[0].slot_recovery.has_value());
  EXPECT_TRUE(a[3].slot_recovery.has_value());
  EXPECT_EQ(a[1].n_examples + a[2].n_examples, a[0].n_examples);
  EXPECT_FALSE(format_table(a).empty());
}

TEST(EvalSuite, FullSplitPoolsHalves) {
  const Corpus test(sample_corpus().begin(), sample_corpus().begin() + 24);
  const auto models = suite_models();
  const auto results = evaluate_examples(*models[0].model, vocab(), test, {});
  const auto full = aggregate(results, split_mask(test, Split::full), "m", "none", Split::full, 0);
  const auto first = aggregate(results, split_mask(test, Split::first_half), "m", "none", Split::first_half, 0);
  const auto second = aggregate(results, split_mask(test, Split::second_half), "m", "none", Split::second_half, 0);
  const double n1 = static_cast<double>(first.n_examples), n2 = static_cast<double>(second.n_examples);
  EXPECT_NEAR(full.hits_at_1, (first.hits_at_1 * n1 + second.hits_at_1 * n2) / (n1 + n2), 1e-12);
  EXPECT_NEAR(*full.cons_mean, (*first.cons_mean * n1 + *second.cons_mean * n2) / (n1 + n2), 1e-12);
  EXPECT_EQ(parse_split("second_half"), Split::second_half);
  EXPECT_THROW(parse_split("middle"), ContractError);
}

}  // namespace
}  // namespace persona::eval
