#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "olive/autodiff.hpp"
#include "olive/random.hpp"

namespace olive {

// Parameter structs are templated on their slot type: BasicTensor<T> for
// storage, BasicVar<T> once bound to a tape. Each struct lists its slots in
// a fixed order through a static `each(self, prefix, f)` and can produce an
// empty copy of its own structure via `rebind<U>()`.

template <class S>
struct Linear {
  S weight;  // in x out
  S bias;    // 1 x out

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    f(pre + "weight", s.weight);
    f(pre + "bias", s.bias);
  }
  template <class U>
  Linear<U> rebind() const { return {}; }
};

template <class S>
struct LayerNormParams {
  S gamma;
  S beta;

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    f(pre + "gamma", s.gamma);
    f(pre + "beta", s.beta);
  }
  template <class U>
  LayerNormParams<U> rebind() const { return {}; }
};

/// Pre-norm transformer block: x + Attn(LN(x)), then h + MLP(LN(h)).
template <class S>
struct Block {
  LayerNormParams<S> ln1;
  Linear<S> q, k, v, o;
  LayerNormParams<S> ln2;
  Linear<S> fc1, fc2;

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    LayerNormParams<S>::each(s.ln1, pre + "ln1.", f);
    Linear<S>::each(s.q, pre + "attn.q.", f);
    Linear<S>::each(s.k, pre + "attn.k.", f);
    Linear<S>::each(s.v, pre + "attn.v.", f);
    Linear<S>::each(s.o, pre + "attn.o.", f);
    LayerNormParams<S>::each(s.ln2, pre + "ln2.", f);
    Linear<S>::each(s.fc1, pre + "mlp.fc1.", f);
    Linear<S>::each(s.fc2, pre + "mlp.fc2.", f);
  }
  template <class U>
  Block<U> rebind() const { return {}; }
};

/// Low-rank update for one weight: delta = scale * B * A in (out x in)
/// orientation, i.e. x -> x * A^T * B^T.
template <class S>
struct LoraPair {
  S a;  // r x in
  S b;  // out x r

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    f(pre + "a", s.a);
    f(pre + "b", s.b);
  }
  template <class U>
  LoraPair<U> rebind() const { return {}; }
};

template <class S>
struct BlockLora {
  LoraPair<S> q, v;

  template <class Self, class F>
  static void each(Self& s, const std::string& pre, F& f) {
    LoraPair<S>::each(s.q, pre + "q.", f);
    LoraPair<S>::each(s.v, pre + "v.", f);
  }
  template <class U>
  BlockLora<U> rebind() const { return {}; }
};

// ---------------------------------------------------------------------------
// Generic helpers over parameter structs

template <class P, class F>
void for_each_param(P& params, F&& f) {
  std::remove_const_t<P>::each(params, "", f);
}

/// Places every slot of `params` on `tape`; `trainable(name)` decides
/// between param() and constant().
template <template <class> class P, class T>
P<BasicVar<T>> bind_params(BasicTape<T>& tape, const P<BasicTensor<T>>& params,
                           const std::function<bool(const std::string&)>& trainable) {
  auto out = params.template rebind<BasicVar<T>>();
  std::vector<BasicVar<T>*> slots;
  for_each_param(out, [&](const std::string&, BasicVar<T>& v) { slots.push_back(&v); });
  std::size_t i = 0;
  for_each_param(params, [&](const std::string& name, const BasicTensor<T>& t) {
    *slots[i++] = trainable(name) ? tape.param(t) : tape.constant(t);
  });
  return out;
}

template <template <class> class P, class T>
P<BasicVar<T>> bind_params(BasicTape<T>& tape, const P<BasicTensor<T>>& params, bool trainable) {
  return bind_params(tape, params, [trainable](const std::string&) { return trainable; });
}

template <template <class> class P, class U, class T>
P<BasicTensor<U>> cast_params(const P<BasicTensor<T>>& params) {
  auto out = params.template rebind<BasicTensor<U>>();
  std::vector<BasicTensor<U>*> slots;
  for_each_param(out, [&](const std::string&, BasicTensor<U>& t) { slots.push_back(&t); });
  std::size_t i = 0;
  for_each_param(params, [&](const std::string&, const BasicTensor<T>& t) { *slots[i++] = t.template cast<U>(); });
  return out;
}

/// Gradients of the last backward() on `tape`, shaped like the bound params.
template <template <class> class P, class T>
P<BasicTensor<T>> collect_grads(const BasicTape<T>& tape, const P<BasicVar<T>>& bound) {
  auto out = bound.template rebind<BasicTensor<T>>();
  std::vector<BasicTensor<T>*> slots;
  for_each_param(out, [&](const std::string&, BasicTensor<T>& t) { slots.push_back(&t); });
  std::size_t i = 0;
  for_each_param(bound, [&](const std::string&, const BasicVar<T>& v) { *slots[i++] = tape.grad(v); });
  return out;
}

template <template <class> class P, class T>
std::vector<BasicTensor<T>> flatten_params(const P<BasicTensor<T>>& params) {
  std::vector<BasicTensor<T>> out;
  for_each_param(params, [&](const std::string&, const BasicTensor<T>& t) { out.push_back(t); });
  return out;
}

/// Pointers to every tensor slot, in visiting order.
template <template <class> class P, class T>
std::vector<BasicTensor<T>*> flatten_param_ptrs(P<BasicTensor<T>>& params) {
  std::vector<BasicTensor<T>*> out;
  for_each_param(params, [&](const std::string&, BasicTensor<T>& t) { out.push_back(&t); });
  return out;
}

/// Rebuilds a bound struct shaped like `structure` from vars in visiting order.
template <template <class> class P, class T>
P<BasicVar<T>> params_from_vars(const P<BasicTensor<T>>& structure, std::span<const BasicVar<T>> vars) {
  auto out = structure.template rebind<BasicVar<T>>();
  std::size_t i = 0;
  for_each_param(out, [&](const std::string&, BasicVar<T>& v) {
    require(i < vars.size(), ErrorCode::Dimension, "too few vars for parameter struct");
    v = vars[i++];
  });
  require(i == vars.size(), ErrorCode::Dimension, "too many vars for parameter struct");
  return out;
}

template <class P>
std::size_t parameter_count(const P& params) {
  std::size_t n = 0;
  for_each_param(params, [&](const std::string&, const auto& t) { n += t.size(); });
  return n;
}

// ---------------------------------------------------------------------------
// Initialisation

template <class T = float>
Linear<BasicTensor<T>> init_linear(Rng& rng, std::size_t in, std::size_t out, double sd) {
  return {random_normal<T>(rng, {in, out}, sd), BasicTensor<T>({1, out})};
}

template <class T = float>
LayerNormParams<BasicTensor<T>> init_layer_norm(std::size_t width) {
  return {BasicTensor<T>({1, width}, T(1)), BasicTensor<T>({1, width})};
}

/// Weights ~ N(0, 1/in); the two residual-branch outputs are further scaled
/// by 1/sqrt(2 * depth).
template <class T = float>
Block<BasicTensor<T>> init_block(Rng& rng, std::size_t width, std::size_t mlp_ratio, std::size_t depth) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(width));
  const double res = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(depth, 1)));
  const std::size_t hidden = width * mlp_ratio;
  Block<BasicTensor<T>> b;
  b.ln1 = init_layer_norm<T>(width);
  b.q = init_linear<T>(rng, width, width, sd);
  b.k = init_linear<T>(rng, width, width, sd);
  b.v = init_linear<T>(rng, width, width, sd);
  b.o = init_linear<T>(rng, width, width, sd * res);
  b.ln2 = init_layer_norm<T>(width);
  b.fc1 = init_linear<T>(rng, width, hidden, sd);
  b.fc2 = init_linear<T>(rng, hidden, width, res / std::sqrt(static_cast<double>(hidden)));
  return b;
}

// ---------------------------------------------------------------------------
// Forward pieces

template <class T>
BasicVar<T> linear(BasicVar<T> x, const Linear<BasicVar<T>>& p) {
  return add(matmul(x, p.weight), p.bias);
}

template <class T>
BasicVar<T> layer_norm(BasicVar<T> x, const LayerNormParams<BasicVar<T>>& p) {
  return layer_norm(x, p.gamma, p.beta);
}

template <class T>
BasicVar<T> lora_delta(BasicVar<T> x, const LoraPair<BasicVar<T>>& p, T factor) {
  return scale(matmul_nt(matmul_nt(x, p.a), p.b), factor);
}

template <class T>
BasicVar<T> block_forward(BasicVar<T> x, const Block<BasicVar<T>>& p, std::size_t heads, bool causal,
                          const BlockLora<BasicVar<T>>* lora = nullptr, T lora_scale = T(0)) {
  auto h = layer_norm(x, p.ln1);
  auto q = linear(h, p.q);
  auto k = linear(h, p.k);
  auto v = linear(h, p.v);
  if (lora) {
    q = add(q, lora_delta(h, lora->q, lora_scale));
    v = add(v, lora_delta(h, lora->v, lora_scale));
  }
  auto a = linear(attention(q, k, v, heads, causal), p.o);
  auto r = add(x, a);
  auto m = linear(gelu(linear(layer_norm(r, p.ln2), p.fc1)), p.fc2);
  return add(r, m);
}

}  // namespace olive
