#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>

#include <json.hpp>

#include "persona/error.hpp"

namespace persona::model {

enum class PersonaMode { none, self, their, both, prepend };
enum class DetectorKind { none, encoder, approximator, generator };

inline constexpr std::array<std::string_view, 5> kPersonaModeNames{"none", "self", "their", "both", "prepend"};
inline constexpr std::array<std::string_view, 4> kDetectorKindNames{"none", "encoder", "approximator", "generator"};

inline std::string to_string(PersonaMode m) { return std::string(kPersonaModeNames[static_cast<std::size_t>(m)]); }
inline std::string to_string(DetectorKind k) { return std::string(kDetectorKindNames[static_cast<std::size_t>(k)]); }

inline PersonaMode parse_persona_mode(std::string_view s) {
  for (std::size_t i = 0; i < kPersonaModeNames.size(); ++i) {
    if (kPersonaModeNames[i] == s) {
      return static_cast<PersonaMode>(i);
    }
  }
  throw ContractError("unknown persona mode '" + std::string(s) + "' (none|self|their|both|prepend)");
}

inline DetectorKind parse_detector_kind(std::string_view s) {
  for (std::size_t i = 0; i < kDetectorKindNames.size(); ++i) {
    if (kDetectorKindNames[i] == s) {
      return static_cast<DetectorKind>(i);
    }
  }
  throw ContractError("unknown detector kind '" + std::string(s) + "' (none|encoder|approximator|generator)");
}

// Whether the dialogue decoder's memory carries a self / their embedding.
inline bool uses_self(PersonaMode m) { return m == PersonaMode::self || m == PersonaMode::both; }
inline bool uses_their(PersonaMode m) { return m == PersonaMode::their || m == PersonaMode::both; }

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t ffn_mult = 4;
  std::size_t max_len = 128;
  std::size_t vocab_size = 0;
  PersonaMode persona_mode = PersonaMode::none;
  DetectorKind detector_kind = DetectorKind::none;
  double alpha = 0.1;
  bool share_first_layer = true;
  double dropout = 0.1;
  // Longest generated response in greedy decoding.
  std::size_t max_response_len = 32;

  bool operator==(const ModelConfig&) const = default;

  bool has_detector() const {
    return detector_kind == DetectorKind::approximator || detector_kind == DetectorKind::generator;
  }
  // The detector's first layer is the context encoder's first layer.
  bool shares_layer() const { return share_first_layer && has_detector(); }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ContractError("model: d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                          std::to_string(n_heads) + ")");
    }
    if (n_enc_layers == 0 || n_dec_layers == 0 || ffn_mult == 0) {
      throw ContractError("model: layer counts and ffn_mult must be positive");
    }
    if (max_len < 4 || max_response_len == 0) {
      throw ContractError("model: max_len must be at least 4 and max_response_len positive");
    }
    if (vocab_size <= 7) {
      throw ContractError("model: vocab_size must exceed the reserved tokens");
    }
    if (!(alpha >= 0.0)) {
      throw ContractError("model: alpha must be >= 0");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
      throw ContractError("model: dropout must lie in [0, 1)");
    }
    const bool plain = persona_mode == PersonaMode::none || persona_mode == PersonaMode::prepend;
    if (plain && detector_kind != DetectorKind::none) {
      throw ContractError("model: persona mode " + to_string(persona_mode) + " requires detector_kind none");
    }
    if (!plain && detector_kind == DetectorKind::none) {
      throw ContractError("model: persona mode " + to_string(persona_mode) + " needs a persona source");
    }
  }
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"d_model", c.d_model},
                             {"n_heads", c.n_heads},
                             {"n_enc_layers", c.n_enc_layers},
                             {"n_dec_layers", c.n_dec_layers},
                             {"ffn_mult", c.ffn_mult},
                             {"max_len", c.max_len},
                             {"vocab_size", c.vocab_size},
                             {"persona_mode", to_string(c.persona_mode)},
                             {"detector_kind", to_string(c.detector_kind)},
                             {"alpha", c.alpha},
                             {"share_first_layer", c.share_first_layer},
                             {"dropout", c.dropout},
                             {"max_response_len", c.max_response_len}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_enc_layers = j.at("n_enc_layers").get<std::size_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.persona_mode = parse_persona_mode(j.at("persona_mode").get<std::string>());
  c.detector_kind = parse_detector_kind(j.at("detector_kind").get<std::string>());
  c.alpha = j.at("alpha").get<double>();
  c.share_first_layer = j.at("share_first_layer").get<bool>();
  c.dropout = j.at("dropout").get<double>();
  c.max_response_len = j.at("max_response_len").get<std::size_t>();
}

}  // namespace persona::model
