#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "persona/corpus/dialogue.hpp"
#include "persona/corpus/vocab.hpp"
#include "persona/model/config.hpp"
#include "persona/model/layers.hpp"

namespace persona::model {

using corpus::Vocabulary;

enum class Target { self, their };

inline std::string to_string(Target t) { return t == Target::self ? "self" : "their"; }

enum class PersonaSource { gold_encoder, approximator, generator_encoder, zero };

struct PersonaEmbedding {
  std::vector<double> values;
  PersonaSource source = PersonaSource::zero;
};

// Token-level inputs for one example.
struct ModelInput {
  std::vector<int> history;  // context encoder input, truncated to max_len
  std::vector<int> self_persona;
  std::vector<int> their_persona;
};

// Keeps the last `max_len` tokens.
inline std::vector<int> truncate_left(std::vector<int> ids, std::size_t max_len) {
  if (ids.size() > max_len) {
    ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(max_len));
  }
  return ids;
}

// Builds the encoder streams for `history` spoken to `responder`. In
// prepend mode the self persona text leads the context and the history part
// is truncated from the left so the persona survives.
inline ModelInput prepare_input(const Vocabulary& vocab, const ModelConfig& config,
                                const std::vector<corpus::Utterance>& history, corpus::Speaker responder,
                                const std::optional<corpus::PersonaProfile>& self,
                                const std::optional<corpus::PersonaProfile>& their) {
  ModelInput in;
  auto stream = corpus::history_stream(vocab, history, responder);
  if (self) {
    in.self_persona = corpus::persona_stream(vocab, self->sentences);
  }
  if (their) {
    in.their_persona = corpus::persona_stream(vocab, their->sentences);
  }
  if (config.persona_mode == PersonaMode::prepend && !in.self_persona.empty()) {
    std::vector<int> prefix{Vocabulary::kBos};
    prefix.insert(prefix.end(), in.self_persona.begin(), in.self_persona.end());
    prefix.push_back(Vocabulary::kSep);
    const std::size_t room = config.max_len > prefix.size() ? config.max_len - prefix.size() : 1;
    stream.erase(stream.begin());  // its BOS moves to the front of the prefix
    stream = truncate_left(std::move(stream), room);
    prefix.insert(prefix.end(), stream.begin(), stream.end());
    in.history = truncate_left(std::move(prefix), config.max_len);
  } else {
    in.history = truncate_left(std::move(stream), config.max_len);
  }
  return in;
}

inline ModelInput prepare_input(const Vocabulary& vocab, const ModelConfig& config, const corpus::DialogueExample& ex) {
  return prepare_input(vocab, config, ex.history, ex.responder(), ex.self_persona, ex.their_persona);
}

// Decoder input / target pair for teacher forcing: BOS + ids and ids + EOS.
struct TeacherForcing {
  std::vector<int> input;
  std::vector<int> target;
};

inline TeacherForcing teacher_forcing(std::span<const int> ids) {
  TeacherForcing tf;
  tf.input.push_back(Vocabulary::kBos);
  tf.input.insert(tf.input.end(), ids.begin(), ids.end());
  tf.target.assign(ids.begin(), ids.end());
  tf.target.push_back(Vocabulary::kEos);
  return tf;
}

inline std::vector<double> row_values(Var v) {
  const auto d = v.value().data();
  return {d.begin(), d.end()};
}

// Encoder-decoder dialogue model with an optional persona source feeding
// the decoder's cross-attention memory.
class PersonaModel {
 public:
  // Embeddings computed from one history.
  struct HistoryEncoding {
    Var context;                 // [1 x d]
    std::optional<Var> detector_self;
    std::optional<Var> detector_their;
  };

  PersonaModel(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng({init_seed, 0x6d6f64656cULL});
    const std::size_t d = config_.d_model;
    positions_ = sinusoid_table(std::max(config_.max_len, config_.max_response_len) + 1, d);
    tok_emb_ = store_.normal("tok_emb", {config_.vocab_size, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    out_bias_ = store_.constant("out_bias", {config_.vocab_size}, 0.0);
    memory_type_ = store_.normal("memory_type", {3, d}, 0.02, rng);
    speaker_emb_ = store_.normal("speaker_emb", {3, d}, 1.0, rng);
    context_ = make_encoder("ctx", nullptr, rng);
    decoder_ = make_decoder("dec", rng);

    const bool personas = config_.persona_mode != PersonaMode::none && config_.persona_mode != PersonaMode::prepend;
    if (personas && (config_.detector_kind == DetectorKind::encoder ||
                     config_.detector_kind == DetectorKind::approximator)) {
      persona_encoder_ = make_encoder("persona_enc", nullptr, rng);
    }
    const auto shared = config_.shares_layer() ? context_.layers[0] : nullptr;
    for (Target t : targets()) {
      const std::string tag = to_string(t);
      if (config_.detector_kind == DetectorKind::approximator) {
        detector(t) = make_encoder("approx_" + tag, shared, rng);
      } else if (config_.detector_kind == DetectorKind::generator) {
        detector(t) = make_encoder("gen_" + tag + ".enc", shared, rng);
        persona_decoder(t) = make_decoder("gen_" + tag + ".dec", rng);
      }
    }
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return store_; }
  const ParamStore& params() const noexcept { return store_; }

  // Persona targets the dialogue decoder is conditioned on.
  std::vector<Target> targets() const {
    std::vector<Target> out;
    if (uses_self(config_.persona_mode)) {
      out.push_back(Target::self);
    }
    if (uses_their(config_.persona_mode)) {
      out.push_back(Target::their);
    }
    return out;
  }

  bool has_persona_encoder() const { return !persona_encoder_.layers.empty(); }
  bool has_persona_decoder(Target t) const { return !persona_decoder(t).layers.empty(); }

  // Parameters that belong to the detector and not to the dialogue model.
  std::vector<ParameterPtr> detector_only_parameters() const {
    std::vector<ParameterPtr> out;
    for (const auto& p : store_.all()) {
      const auto& n = p->name();
      if (n.rfind("approx_", 0) == 0 || n.rfind("gen_", 0) == 0) {
        out.push_back(p);
      }
    }
    return out;
  }

  std::vector<ParameterPtr> persona_encoder_parameters() const {
    std::vector<ParameterPtr> out;
    for (const auto& p : store_.all()) {
      if (p->name().rfind("persona_enc.", 0) == 0) {
        out.push_back(p);
      }
    }
    return out;
  }

  // ---- graph building blocks ----

  // Role of every history token relative to the responder, whose tag ends
  // the stream: 0 before the first speaker tag, 1 responder, 2 partner.
  static std::vector<int> speaker_roles(std::span<const int> ids) {
    auto is_tag = [](int id) { return id == Vocabulary::kSpkA || id == Vocabulary::kSpkB; };
    int responder = 0;
    for (int id : ids) {
      responder = is_tag(id) ? id : responder;
    }
    std::vector<int> roles(ids.size(), 0);
    int current = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      current = is_tag(ids[i]) ? ids[i] : current;
      roles[i] = current == 0 ? 0 : current == responder ? 1 : 2;
    }
    return roles;
  }

  // Scaled token embeddings plus sinusoidal positions, [t x d]. History
  // streams also get a learned speaker-role embedding per token.
  Var embed(const Pass& pass, std::span<const int> ids, bool history = false) const {
    if (ids.size() >= positions_.rows()) {
      throw ContractError("sequence of " + std::to_string(ids.size()) + " tokens exceeds the position table");
    }
    const std::size_t d = config_.d_model;
    Var x = diff::scale(diff::embedding(pass.p(tok_emb_), ids), std::sqrt(static_cast<double>(d)));
    Tensor pos({ids.size(), d}, diff::Buffer(positions_.raw(), positions_.raw() + ids.size() * d));
    x = diff::add(x, pass.graph.constant(std::move(pos)));
    if (history) {
      x = diff::add(x, diff::embedding(pass.p(speaker_emb_), speaker_roles(ids)));
    }
    return pass.drop(x);
  }

  HistoryEncoding encode_history(const Pass& pass, std::span<const int> history) const {
    require_history(history);
    const Var x = embed(pass, history, true);
    HistoryEncoding enc;
    std::size_t from = 0;
    Var base = x;
    if (config_.shares_layer()) {
      base = (*context_.layers[0])(pass, x);
      from = 1;
    }
    enc.context = context_(pass, base, from);
    for (Target t : targets()) {
      if (!detector(t).layers.empty()) {
        (t == Target::self ? enc.detector_self : enc.detector_their) = detector(t)(pass, base, from);
      }
    }
    return enc;
  }

  // E(p) as [1 x d]; zeros for an empty persona.
  Var persona_embedding(const Pass& pass, std::span<const int> persona) const {
    if (!has_persona_encoder()) {
      throw ContractError("model has no persona encoder (detector_kind " + to_string(config_.detector_kind) + ")");
    }
    if (persona.empty()) {
      return pass.graph.constant(Tensor({1, config_.d_model}, 0.0));
    }
    const auto ids = truncate_left({persona.begin(), persona.end()}, config_.max_len);
    return persona_encoder_(pass, embed(pass, ids));
  }

  // Persona vectors for the dialogue decoder. With detector kind encoder
  // they come from the gold personas in `in`, otherwise from `enc`.
  std::pair<std::optional<Var>, std::optional<Var>> conditioning(const Pass& pass, const ModelInput& in,
                                                                 const HistoryEncoding& enc,
                                                                 bool detach_detector = false) const {
    std::optional<Var> self, their;
    for (Target t : targets()) {
      Var v;
      if (config_.detector_kind == DetectorKind::encoder) {
        v = persona_embedding(pass, t == Target::self ? in.self_persona : in.their_persona);
      } else {
        v = *(t == Target::self ? enc.detector_self : enc.detector_their);
        if (detach_detector) {
          v = diff::detach(v);
        }
      }
      (t == Target::self ? self : their) = v;
    }
    return {self, their};
  }

  // Cross-attention memory: context, then self, then their.
  Var memory(const Pass& pass, Var context, const std::optional<Var>& self, const std::optional<Var>& their) const {
    if (self.has_value() != uses_self(config_.persona_mode) || their.has_value() != uses_their(config_.persona_mode)) {
      throw ContractError("persona embeddings do not match persona mode " + to_string(config_.persona_mode));
    }
    const Var types = pass.p(memory_type_);
    auto typed = [&](Var v, std::size_t slot) {
      return diff::add(v, diff::reshape(diff::select_row(types, slot), {1, config_.d_model}));
    };
    std::vector<Var> parts{typed(context, 0)};
    if (self) {
      parts.push_back(typed(*self, 1));
    }
    if (their) {
      parts.push_back(typed(*their, 2));
    }
    return parts.size() == 1 ? parts[0] : diff::concat_rows(parts);
  }

  // Teacher-forced response logits [t x V] for decoder input ids.
  Var response_logits(const Pass& pass, Var memory, std::span<const int> input) const {
    return project(pass, decoder_(pass, embed(pass, input), memory));
  }

  // Teacher-forced persona decoder logits [t x V]; memory is the embedding.
  Var persona_logits(const Pass& pass, Target t, Var embedding, std::span<const int> input) const {
    if (!has_persona_decoder(t)) {
      throw ContractError("model has no " + to_string(t) + " persona decoder");
    }
    return project(pass, persona_decoder(t)(pass, embed(pass, input), embedding));
  }

  // ---- inference (no gradient, no dropout) ----

  std::vector<double> encode_context(std::span<const int> history) const {
    Graph g(false);
    Pass pass{g};
    return row_values(encode_history(pass, truncated(history)).context);
  }

  PersonaEmbedding encode_persona(std::span<const int> persona) const {
    Graph g(false);
    Pass pass{g};
    PersonaEmbedding e{row_values(persona_embedding(pass, persona)),
                       persona.empty() ? PersonaSource::zero : PersonaSource::gold_encoder};
    return e;
  }

  PersonaEmbedding detect_persona(std::span<const int> history, Target t) const {
    if (!config_.has_detector() || detector(t).layers.empty()) {
      throw ContractError("model has no " + to_string(t) + " persona detector");
    }
    Graph g(false);
    Pass pass{g};
    const auto enc = encode_history(pass, truncated(history));
    const Var v = *(t == Target::self ? enc.detector_self : enc.detector_their);
    return {row_values(v), config_.detector_kind == DetectorKind::approximator ? PersonaSource::approximator
                                                                                 : PersonaSource::generator_encoder};
  }

  PersonaEmbedding approximate_persona(std::span<const int> history, Target t) const {
    if (config_.detector_kind != DetectorKind::approximator) {
      throw ContractError("approximate_persona needs an approximator model");
    }
    return detect_persona(history, t);
  }

  PersonaEmbedding generator_encode(std::span<const int> history, Target t) const {
    if (config_.detector_kind != DetectorKind::generator) {
      throw ContractError("generator_encode needs a generator model");
    }
    return detect_persona(history, t);
  }

  // Greedy persona text ids (EOS included when produced).
  std::vector<int> greedy_persona(std::span<const int> history, Target t, std::size_t max_tokens = 0) const {
    if (!has_persona_decoder(t)) {
      throw ContractError("model has no " + to_string(t) + " persona decoder");
    }
    const auto e = generator_encode(history, t);
    const Tensor emb({1, config_.d_model}, e.values);
    return greedy(max_tokens == 0 ? config_.max_len : max_tokens, [&](const Pass& pass, std::span<const int> input) {
      return persona_logits(pass, t, pass.graph.constant(emb), input);
    });
  }

  // Memory for an input, computed without gradient.
  Tensor inference_memory(const ModelInput& in) const {
    Graph g(false);
    Pass pass{g};
    const auto enc = encode_history(pass, truncated(in.history));
    const auto [self, their] = conditioning(pass, in, enc);
    return memory(pass, enc.context, self, their).value();
  }

  std::vector<int> greedy_response(const ModelInput& in) const {
    const Tensor mem = inference_memory(in);
    return greedy(config_.max_response_len, [&](const Pass& pass, std::span<const int> input) {
      return response_logits(pass, pass.graph.constant(mem), input);
    });
  }

  // Mean gold-token log-probability of each candidate (EOS included).
  std::vector<double> score_candidates(const ModelInput& in, const std::vector<std::vector<int>>& candidates) const {
    const Tensor mem = inference_memory(in);
    std::vector<double> out;
    out.reserve(candidates.size());
    for (const auto& c : candidates) {
      out.push_back(score_with_memory(mem, c));
    }
    return out;
  }

  double score_response(const ModelInput& in, std::span<const int> candidate) const {
    return score_with_memory(inference_memory(in), candidate);
  }

  double score_with_memory(const Tensor& mem, std::span<const int> candidate) const {
    if (candidate.empty()) {
      throw ContractError("score_response: empty candidate");
    }
    const auto tf = teacher_forcing(candidate);
    Graph g(false);
    Pass pass{g};
    const Var logits = response_logits(pass, g.constant(mem), tf.input);
    return -diff::cross_entropy(logits, tf.target, Vocabulary::kPad).item();
  }

  // Grows the token tables to `vocab_size` rows; new rows are random.
  void extend_vocab(std::size_t vocab_size, Rng& rng) {
    const std::size_t old = config_.vocab_size, d = config_.d_model;
    if (vocab_size < old) {
      throw ContractError("extend_vocab: cannot shrink the vocabulary");
    }
    if (vocab_size == old) {
      return;
    }
    Tensor emb({vocab_size, d});
    std::copy(tok_emb_->value().raw(), tok_emb_->value().raw() + old * d, emb.raw());
    for (std::size_t i = old * d; i < vocab_size * d; ++i) {
      emb[i] = rng.normal() / std::sqrt(static_cast<double>(d));
    }
    Tensor bias({vocab_size}, 0.0);
    std::copy(out_bias_->value().raw(), out_bias_->value().raw() + old, bias.raw());
    tok_emb_->value() = std::move(emb);
    tok_emb_->grad() = Tensor({vocab_size, d});
    out_bias_->value() = std::move(bias);
    out_bias_->grad() = Tensor({vocab_size});
    config_.vocab_size = vocab_size;
  }

  std::vector<int> truncated(std::span<const int> history) const {
    return truncate_left({history.begin(), history.end()}, config_.max_len);
  }

  // Test hooks for layer sharing.
  const Encoder& context_encoder() const noexcept { return context_; }
  const Encoder& detector_encoder(Target t) const { return detector(t); }

 private:
  Encoder make_encoder(const std::string& name, const std::shared_ptr<EncoderLayer>& first, Rng& rng) {
    Encoder e;
    for (std::size_t i = 0; i < config_.n_enc_layers; ++i) {
      if (i == 0 && first) {
        e.layers.push_back(first);
        continue;
      }
      e.layers.push_back(EncoderLayer::make(store_, name + ".layer" + std::to_string(i), config_.d_model,
                                            config_.n_heads, config_.ffn_mult, config_.n_enc_layers, rng));
    }
    e.final_norm = LayerNormParams::make(store_, name + ".norm", config_.d_model);
    return e;
  }

  Decoder make_decoder(const std::string& name, Rng& rng) {
    Decoder dec;
    for (std::size_t i = 0; i < config_.n_dec_layers; ++i) {
      dec.layers.push_back(DecoderLayer::make(store_, name + ".layer" + std::to_string(i), config_.d_model,
                                              config_.n_heads, config_.ffn_mult, config_.n_dec_layers, rng));
    }
    dec.final_norm = LayerNormParams::make(store_, name + ".norm", config_.d_model);
    return dec;
  }

  Var project(const Pass& pass, Var h) const {
    return diff::add_bias(diff::matmul_nt(h, pass.p(tok_emb_)), pass.p(out_bias_));
  }

  void require_history(std::span<const int> history) const {
    if (history.empty()) {
      throw ContractError("encode_context: empty history");
    }
    if (history.size() > config_.max_len) {
      throw ContractError("encode_context: history of " + std::to_string(history.size()) +
                          " tokens exceeds max_len " + std::to_string(config_.max_len));
    }
  }

  template <typename LogitsFn>
  std::vector<int> greedy(std::size_t max_tokens, LogitsFn&& logits_fn) const {
    std::vector<int> input{Vocabulary::kBos};
    std::vector<int> out;
    while (out.size() < max_tokens) {
      Graph g(false);
      Pass pass{g};
      const Var logits = logits_fn(pass, input);
      const auto last = logits.value().row(logits.rows() - 1);
      const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
      out.push_back(next);
      if (next == Vocabulary::kEos) {
        break;
      }
      input.push_back(next);
    }
    return out;
  }

  Encoder& detector(Target t) { return t == Target::self ? detector_self_ : detector_their_; }
  const Encoder& detector(Target t) const { return t == Target::self ? detector_self_ : detector_their_; }
  Decoder& persona_decoder(Target t) { return t == Target::self ? persona_dec_self_ : persona_dec_their_; }
  const Decoder& persona_decoder(Target t) const { return t == Target::self ? persona_dec_self_ : persona_dec_their_; }

  ModelConfig config_;
  ParamStore store_;
  Tensor positions_;
  ParameterPtr tok_emb_, out_bias_, memory_type_, speaker_emb_;
  Encoder context_;
  Encoder persona_encoder_;
  Encoder detector_self_, detector_their_;
  Decoder decoder_;
  Decoder persona_dec_self_, persona_dec_their_;
};

}  // namespace persona::model
