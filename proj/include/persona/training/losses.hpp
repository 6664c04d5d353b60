#pragma once

#include <atomic>
#include <optional>
#include <span>
#include <vector>

#include "persona/diff/ops.hpp"
#include "persona/model/model.hpp"

namespace persona::training {

using diff::Graph;
using diff::Tensor;
using diff::Var;
using model::Pass;
using model::PersonaModel;
using model::Target;

// Number of pg_loss evaluations so far, for protocol instrumentation.
inline std::atomic<std::size_t>& pg_loss_evaluations() {
  static std::atomic<std::size_t> count{0};
  return count;
}

// Token-mean cross-entropy of the teacher-forced response (EOS-terminated).
inline Var mle_loss(const Pass& pass, const PersonaModel& m, Var memory, std::span<const int> response) {
  if (response.empty()) {
    throw ContractError("mle_loss: empty gold response");
  }
  const auto tf = model::teacher_forcing(response);
  return diff::cross_entropy(m.response_logits(pass, memory, tf.input), tf.target, model::Vocabulary::kPad);
}

// Token-mean persona reconstruction loss of the persona decoder.
inline Var pg_loss(const Pass& pass, const PersonaModel& m, Target t, Var embedding, std::span<const int> persona) {
  if (persona.empty()) {
    throw ContractError("pg_loss: example carries no " + model::to_string(t) + " persona");
  }
  pg_loss_evaluations().fetch_add(1, std::memory_order_relaxed);
  const auto tf = model::teacher_forcing(persona);
  return diff::cross_entropy(m.persona_logits(pass, t, embedding, tf.input), tf.target, model::Vocabulary::kPad);
}

// 1 - cos(a, e).
inline Var approx_loss(Var approximation, Var target) {
  Graph& g = *approximation.graph;
  return diff::add(g.constant(Tensor::scalar(1.0)), diff::scale(diff::cosine_similarity(approximation, target), -1.0));
}

// 1 - cos(A(h), E(p)) against the frozen persona encoder.
inline Var approx_loss(const Pass& pass, const PersonaModel& m, Var approximation, std::span<const int> persona) {
  if (persona.empty()) {
    throw ContractError("approx_loss: example carries no persona");
  }
  for (const auto& p : m.persona_encoder_parameters()) {
    if (!p->frozen()) {
      throw ContractError("approx_loss: persona encoder parameter " + p->name() + " is not frozen");
    }
  }
  return approx_loss(approximation, m.persona_embedding(pass, persona));
}

inline double joint_loss(double mle, std::optional<double> detect, double alpha, bool joint_mle_for_detector) {
  if (!detect) {
    return mle;
  }
  return joint_mle_for_detector ? mle + alpha * *detect : *detect;
}

inline Var joint_loss(Var mle, std::optional<Var> detect, double alpha, bool joint_mle_for_detector) {
  if (!detect) {
    return mle;
  }
  return joint_mle_for_detector ? diff::add(mle, diff::scale(*detect, alpha)) : *detect;
}

struct StepSettings {
  double alpha = 0.1;
  bool joint_mle_for_detector = true;
  bool detector_loss = true;  // off during transfer: no persona text
};

struct ExampleLoss {
  Var objective;
  double mle = 0.0;
  std::optional<double> detect;
};

// Per-example training objective. With joint training off the dialogue
// decoder sees a detached detector embedding, so the detector is trained by
// its own loss only; dialogue parameters still get the MLE gradient.
inline ExampleLoss example_objective(const Pass& pass, const PersonaModel& m, const model::ModelInput& in,
                                     std::span<const int> response, const StepSettings& s) {
  const auto& cfg = m.config();
  const auto enc = m.encode_history(pass, in.history);
  const bool detached = cfg.has_detector() && !s.joint_mle_for_detector;
  const auto [self, their] = m.conditioning(pass, in, enc, detached);
  const Var mle = mle_loss(pass, m, m.memory(pass, enc.context, self, their), response);

  std::optional<Var> detect;
  if (cfg.has_detector() && s.detector_loss) {
    std::vector<Var> terms;
    for (Target t : m.targets()) {
      const Var emb = *(t == Target::self ? enc.detector_self : enc.detector_their);
      const auto& persona = t == Target::self ? in.self_persona : in.their_persona;
      terms.push_back(cfg.detector_kind == model::DetectorKind::generator ? pg_loss(pass, m, t, emb, persona)
                                                                          : approx_loss(pass, m, emb, persona));
    }
    detect = terms.size() == 1 ? terms[0] : diff::scale(diff::add(terms[0], terms[1]), 0.5);
  }
  ExampleLoss out;
  out.mle = mle.item();
  if (detect) {
    out.detect = detect->item();
  }
  if (detect && !s.joint_mle_for_detector) {
    // Dialogue model on MLE, detector on its own weighted loss.
    out.objective = diff::add(mle, diff::scale(*detect, s.alpha));
  } else {
    out.objective = joint_loss(mle, detect, s.alpha, true);
  }
  return out;
}

}  // namespace persona::training
