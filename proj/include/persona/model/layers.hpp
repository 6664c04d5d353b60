#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "persona/diff/graph.hpp"
#include "persona/diff/ops.hpp"
#include "persona/error.hpp"
#include "persona/util/rng.hpp"

namespace persona::model {

using diff::Graph;
using diff::Parameter;
using diff::ParameterPtr;
using diff::Shape;
using diff::Tensor;
using diff::Var;

// Named parameters in creation order. A parameter shared by several
// modules is registered once.
class ParamStore {
 public:
  ParameterPtr add(const std::string& name, Tensor value) {
    if (index_.contains(name)) {
      throw ContractError("duplicate parameter name '" + name + "'");
    }
    auto p = std::make_shared<Parameter>(name, std::move(value));
    index_.emplace(name, params_.size());
    params_.push_back(p);
    return p;
  }

  ParameterPtr normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) {
      v = stddev * rng.normal();
    }
    return add(name, std::move(t));
  }

  ParameterPtr constant(const std::string& name, Shape shape, double value) {
    return add(name, Tensor(std::move(shape), value));
  }

  const std::vector<ParameterPtr>& all() const noexcept { return params_; }

  ParameterPtr find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second];
  }

  std::vector<Parameter*> raw() const {
    std::vector<Parameter*> out;
    for (const auto& p : params_) {
      out.push_back(p.get());
    }
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      n += p->size();
    }
    return n;
  }

 private:
  std::vector<ParameterPtr> params_;
  std::map<std::string, std::size_t> index_;
};

// Per-forward settings: dropout is active only with a generator attached.
struct Pass {
  Graph& graph;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Var drop(Var x) const { return rng != nullptr && dropout > 0.0 ? diff::dropout(x, dropout, *rng) : x; }
  Var p(const ParameterPtr& param) const { return graph.parameter(*param); }
};

inline Tensor sinusoid_table(std::size_t length, std::size_t d) {
  Tensor t({length, d});
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      t.at(pos, i) = std::sin(angle);
      if (i + 1 < d) {
        t.at(pos, i + 1) = std::cos(angle);
      }
    }
  }
  return t;
}

struct LayerNormParams {
  ParameterPtr gamma, beta;

  static LayerNormParams make(ParamStore& store, const std::string& name, std::size_t d) {
    return {store.constant(name + ".gamma", {d}, 1.0), store.constant(name + ".beta", {d}, 0.0)};
  }
  Var operator()(const Pass& pass, Var x) const { return diff::layer_norm(x, pass.p(gamma), pass.p(beta)); }
};

struct AttentionParams {
  ParameterPtr wq, wk, wv, wo;

  static AttentionParams make(ParamStore& store, const std::string& name, std::size_t d, double out_std, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    return {store.normal(name + ".wq", {d, d}, s, rng), store.normal(name + ".wk", {d, d}, s, rng),
            store.normal(name + ".wv", {d, d}, s, rng), store.normal(name + ".wo", {d, d}, out_std, rng)};
  }

  // Queries from `xq`, keys and values from `xkv`.
  Var operator()(const Pass& pass, Var xq, Var xkv, std::size_t heads, bool causal) const {
    const Var q = diff::matmul(xq, pass.p(wq));
    const Var k = diff::matmul(xkv, pass.p(wk));
    const Var v = diff::matmul(xkv, pass.p(wv));
    return diff::matmul(diff::attention(q, k, v, heads, causal), pass.p(wo));
  }
};

struct FeedForwardParams {
  ParameterPtr w1, b1, w2, b2;

  static FeedForwardParams make(ParamStore& store, const std::string& name, std::size_t d, std::size_t hidden,
                                double out_std, Rng& rng) {
    return {store.normal(name + ".w1", {d, hidden}, 1.0 / std::sqrt(static_cast<double>(d)), rng),
            store.constant(name + ".b1", {hidden}, 0.0), store.normal(name + ".w2", {hidden, d}, out_std, rng),
            store.constant(name + ".b2", {d}, 0.0)};
  }
  Var operator()(const Pass& pass, Var x) const {
    const Var h = diff::gelu(diff::add_bias(diff::matmul(x, pass.p(w1)), pass.p(b1)));
    return diff::add_bias(diff::matmul(h, pass.p(w2)), pass.p(b2));
  }
};

inline double residual_std(std::size_t d, std::size_t layers) {
  return 1.0 / std::sqrt(static_cast<double>(d) * 2.0 * static_cast<double>(layers));
}

inline Var last_row(Var x) { return diff::reshape(diff::select_row(x, x.rows() - 1), {1, x.cols()}); }

// Pre-norm bidirectional self-attention block.
struct EncoderLayer {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  FeedForwardParams ffn;
  std::size_t heads = 1;

  static std::shared_ptr<EncoderLayer> make(ParamStore& store, const std::string& name, std::size_t d,
                                            std::size_t heads, std::size_t ffn_mult, std::size_t depth, Rng& rng) {
    auto l = std::make_shared<EncoderLayer>();
    const double out = residual_std(d, depth);
    l->ln1 = LayerNormParams::make(store, name + ".ln1", d);
    l->attn = AttentionParams::make(store, name + ".attn", d, out, rng);
    l->ln2 = LayerNormParams::make(store, name + ".ln2", d);
    l->ffn = FeedForwardParams::make(store, name + ".ffn", d, d * ffn_mult, out, rng);
    l->heads = heads;
    return l;
  }

  // With `last_only`, only the final position is produced ([1 x d]); keys
  // and values still cover the whole sequence, so that row is exact.
  Var operator()(const Pass& pass, Var x, bool last_only = false) const {
    const Var n = ln1(pass, x);
    const Var resid = last_only ? last_row(x) : x;
    const Var q_in = last_only ? last_row(n) : n;
    Var h = diff::add(resid, pass.drop(attn(pass, q_in, n, heads, false)));
    return diff::add(h, pass.drop(ffn(pass, ln2(pass, h))));
  }
};

// Pre-norm causal self-attention, cross-attention to a memory, feed-forward.
struct DecoderLayer {
  LayerNormParams ln1, ln2, ln3;
  AttentionParams self_attn, cross_attn;
  FeedForwardParams ffn;
  std::size_t heads = 1;

  static std::shared_ptr<DecoderLayer> make(ParamStore& store, const std::string& name, std::size_t d,
                                            std::size_t heads, std::size_t ffn_mult, std::size_t depth, Rng& rng) {
    auto l = std::make_shared<DecoderLayer>();
    const double out = residual_std(d, depth);
    l->ln1 = LayerNormParams::make(store, name + ".ln1", d);
    l->self_attn = AttentionParams::make(store, name + ".self", d, out, rng);
    l->ln2 = LayerNormParams::make(store, name + ".ln2", d);
    l->cross_attn = AttentionParams::make(store, name + ".cross", d, out, rng);
    l->ln3 = LayerNormParams::make(store, name + ".ln3", d);
    l->ffn = FeedForwardParams::make(store, name + ".ffn", d, d * ffn_mult, out, rng);
    l->heads = heads;
    return l;
  }

  Var operator()(const Pass& pass, Var x, Var memory) const {
    const Var n1 = ln1(pass, x);
    Var h = diff::add(x, pass.drop(self_attn(pass, n1, n1, heads, true)));
    h = diff::add(h, pass.drop(cross_attn(pass, ln2(pass, h), memory, heads, false)));
    return diff::add(h, pass.drop(ffn(pass, ln3(pass, h))));
  }
};

// Stack of encoder layers plus a final norm; outputs the last position.
struct Encoder {
  std::vector<std::shared_ptr<EncoderLayer>> layers;
  LayerNormParams final_norm;

  // Final-position embedding [1 x d] from embedded input x [t x d]. Layers
  // before `from_layer` are assumed to have been applied already.
  Var operator()(const Pass& pass, Var x, std::size_t from_layer = 0) const {
    for (std::size_t i = from_layer; i < layers.size(); ++i) {
      x = (*layers[i])(pass, x, i + 1 == layers.size());
    }
    if (from_layer == layers.size()) {
      x = last_row(x);
    }
    return final_norm(pass, x);
  }
};

struct Decoder {
  std::vector<std::shared_ptr<DecoderLayer>> layers;
  LayerNormParams final_norm;

  Var operator()(const Pass& pass, Var x, Var memory) const {
    for (const auto& layer : layers) {
      x = (*layer)(pass, x, memory);
    }
    return final_norm(pass, x);
  }
};

}  // namespace persona::model
