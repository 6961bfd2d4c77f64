#pragma once

// Parameter registry and the handful of layers the model is built from.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "t2icount/autodiff.hpp"
#include "t2icount/tensor.hpp"

namespace t2i::nn {

// Which optimizer group a parameter belongs to. Frozen encoders are in none.
enum class ParamGroup { FrozenEncoder, Denoiser, Head };

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::FrozenEncoder:
      return "frozen";
    case ParamGroup::Denoiser:
      return "denoiser";
    case ParamGroup::Head:
      return "head";
  }
  return "?";
}

template <typename Scalar>
struct Parameter {
  std::string name;
  ParamGroup group;
  ad::Var<Scalar> var;
};

template <typename Scalar>
class ParameterStore {
 public:
  ad::Var<Scalar> add(const std::string& name, Mat<Scalar> init, ParamGroup group) {
    if (index_.count(name)) throw ConfigError("parameter registered twice: " + name);
    auto v = ad::Var<Scalar>::leaf(std::move(init), group != ParamGroup::FrozenEncoder);
    index_[name] = params_.size();
    params_.push_back({name, group, v});
    return v;
  }

  const std::vector<Parameter<Scalar>>& all() const { return params_; }
  std::vector<Parameter<Scalar>>& all() { return params_; }

  const Parameter<Scalar>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<Scalar>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  Eigen::Index scalar_count(ParamGroup g) const {
    Eigen::Index n = 0;
    for (const auto& p : params_)
      if (p.group == g) n += p.var.value().size();
    return n;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename Scalar>
Mat<Scalar> uniform_init(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
  return m;
}

template <typename Scalar>
Mat<Scalar> normal_init(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
  return m;
}

template <typename Scalar>
struct Linear {
  ad::Var<Scalar> weight;  // [out, in]
  ad::Var<Scalar> bias;    // [out, 1]

  Linear() = default;
  Linear(ParameterStore<Scalar>& store, const std::string& name, int in, int out, ParamGroup group,
         std::mt19937_64& rng, bool with_bias = true) {
    weight = store.add(name + ".weight", uniform_init<Scalar>(out, in, std::sqrt(3.0 / in), rng), group);
    if (with_bias) bias = store.add(name + ".bias", Mat<Scalar>::Zero(out, 1), group);
  }

  // x: [in, N] -> [out, N]
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const {
    auto y = bias.defined() ? ad::add_bias(ad::matmul(weight, x), bias) : ad::matmul(weight, x);
    return x.height() > 0 ? ad::with_raster(y, x.height(), x.width()) : y;
  }
};

template <typename Scalar>
struct Conv2d {
  ad::Var<Scalar> weight;  // [out, k*k*in], rows ordered (ky, kx, c_in)
  ad::Var<Scalar> bias;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  Conv2d() = default;
  Conv2d(ParameterStore<Scalar>& store, const std::string& name, int in, int out, int k, int s, ParamGroup group,
         std::mt19937_64& rng)
      : kernel(k), stride(s), pad(k / 2) {
    const int fan_in = in * k * k;
    weight = store.add(name + ".weight", uniform_init<Scalar>(out, fan_in, std::sqrt(3.0 / fan_in), rng), group);
    bias = store.add(name + ".bias", Mat<Scalar>::Zero(out, 1), group);
  }

  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const { return ad::conv2d(x, weight, bias, kernel, stride, pad); }
};

template <typename Scalar>
struct LayerNorm {
  ad::Var<Scalar> gain;
  ad::Var<Scalar> bias;

  LayerNorm() = default;
  LayerNorm(ParameterStore<Scalar>& store, const std::string& name, int dim, ParamGroup group) {
    gain = store.add(name + ".gain", Mat<Scalar>::Ones(dim, 1), group);
    bias = store.add(name + ".bias", Mat<Scalar>::Zero(dim, 1), group);
  }

  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x) const { return ad::layer_norm(x, gain, bias); }
};

// Multi-head scaled dot-product attention. Columns are tokens.
template <typename Scalar>
struct MultiHeadAttention {
  Linear<Scalar> to_q, to_k, to_v, to_out;
  int heads = 1;
  int inner = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<Scalar>& store, const std::string& name, int query_dim, int context_dim,
                     int inner_dim, int n_heads, ParamGroup group, std::mt19937_64& rng)
      : heads(n_heads), inner(inner_dim) {
    if (inner_dim % n_heads != 0)
      throw ConfigError(name + ": width " + std::to_string(inner_dim) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
    to_q = Linear<Scalar>(store, name + ".to_q", query_dim, inner_dim, group, rng, false);
    to_k = Linear<Scalar>(store, name + ".to_k", context_dim, inner_dim, group, rng, false);
    to_v = Linear<Scalar>(store, name + ".to_v", context_dim, inner_dim, group, rng, false);
    to_out = Linear<Scalar>(store, name + ".to_out", inner_dim, query_dim, group, rng);
  }

  // query: [d_q, N_q], context: [d_c, N_k]. When `probs` is given it receives
  // the attention weights [N_q, N_k] averaged over heads.
  ad::Var<Scalar> operator()(const ad::Var<Scalar>& query, const ad::Var<Scalar>& context,
                             Mat<Scalar>* probs = nullptr) const {
    const ad::Var<Scalar> q = ad::matmul(to_q.weight, query);
    const ad::Var<Scalar> k = ad::matmul(to_k.weight, context);
    const ad::Var<Scalar> v = ad::matmul(to_v.weight, context);
    const int dh = inner / heads;
    const Scalar temperature = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    if (probs) *probs = Mat<Scalar>::Zero(query.cols(), context.cols());
    std::vector<ad::Var<Scalar>> outs;
    outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      auto qh = heads == 1 ? q : ad::slice_rows(q, h * dh, dh);
      auto kh = heads == 1 ? k : ad::slice_rows(k, h * dh, dh);
      auto vh = heads == 1 ? v : ad::slice_rows(v, h * dh, dh);
      auto p = ad::softmax_rows(ad::scale(ad::matmul_tn(qh, kh), temperature));
      if (probs) *probs += p.value() / static_cast<Scalar>(heads);
      outs.push_back(ad::matmul_nt(vh, p));
    }
    auto merged = heads == 1 ? outs.front() : ad::concat_rows(outs);
    auto y = ad::add_bias(ad::matmul(to_out.weight, merged), to_out.bias);
    return query.height() > 0 ? ad::with_raster(y, query.height(), query.width()) : y;
  }
};

// Pre-norm residual attention: x + Attn(LN(x), LN(context)).
template <typename Scalar>
struct AttentionBlock {
  LayerNorm<Scalar> norm_query;
  LayerNorm<Scalar> norm_context;
  MultiHeadAttention<Scalar> attention;
  bool self_attention = false;

  AttentionBlock() = default;
  AttentionBlock(ParameterStore<Scalar>& store, const std::string& name, int query_dim, int context_dim, int heads,
                 bool is_self, ParamGroup group, std::mt19937_64& rng)
      : self_attention(is_self) {
    norm_query = LayerNorm<Scalar>(store, name + ".norm_q", query_dim, group);
    if (!is_self) norm_context = LayerNorm<Scalar>(store, name + ".norm_ctx", context_dim, group);
    attention = MultiHeadAttention<Scalar>(store, name + ".attn", query_dim, is_self ? query_dim : context_dim,
                                           query_dim, heads, group, rng);
  }

  ad::Var<Scalar> operator()(const ad::Var<Scalar>& x, const ad::Var<Scalar>& context = {},
                             Mat<Scalar>* probs = nullptr) const {
    auto q = norm_query(x);
    auto ctx = self_attention ? q : norm_context(context);
    return ad::add(x, attention(q, ctx, probs));
  }
};

}  // namespace t2i::nn
