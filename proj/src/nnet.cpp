#include "sbfa/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace sbfa {

namespace {

using Vec = std::vector<double>;
using CSpan = std::span<const double>;

constexpr double kNormEps = 1e-5;

std::string kind_of(const std::string& name) {
  // "layer.3.mlp.up_proj" -> "mlp.up_proj"
  const auto first = name.find('.');
  const auto second = name.find('.', first + 1);
  return name.substr(second + 1);
}

ParamInfo param(int layer, const std::string& suffix, std::vector<std::size_t> shape) {
  std::string name = fmt::format("layer.{}.{}", layer, suffix);
  std::string kind = kind_of(name);
  return {std::move(name), layer, std::move(kind), std::move(shape)};
}

void require_finite(CSpan v, const std::vector<ParamInfo>& layout, std::size_t tensor) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalRuntimeError(layout[tensor].name);
  }
}

// y = W x + b, W is out x in row-major.
void linear(CSpan w, CSpan b, CSpan x, std::span<double> y) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < y.size(); ++o) {
    const double* row = w.data() + o * in;
    double acc = b.empty() ? 0.0 : b[o];
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// Linear without bias.
void matvec(CSpan w, CSpan x, std::span<double> y) { linear(w, {}, x, y); }

// dW += dy x^T, db += dy, dx = W^T dy (dx may be empty).
void linear_back(CSpan w, CSpan x, CSpan dy, Vec& dw, Vec* db, std::span<double> dx) {
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < dy.size(); ++o) {
    const double g = dy[o];
    double* drow = dw.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) drow[i] += g * x[i];
    if (db) (*db)[o] += g;
  }
  if (!dx.empty()) {
    std::fill(dx.begin(), dx.end(), 0.0);
    for (std::size_t o = 0; o < dy.size(); ++o) {
      const double g = dy[o];
      const double* row = w.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) dx[i] += row[i] * g;
    }
  }
}

struct NormCache {
  Vec xhat;
  double rstd = 0.0;
};

void layer_norm(CSpan gain, CSpan bias, CSpan x, std::span<double> y, NormCache& c) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= n;
  c.rstd = 1.0 / std::sqrt(var + kNormEps);
  c.xhat.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    c.xhat[i] = (x[i] - mean) * c.rstd;
    y[i] = c.xhat[i] * gain[i] + bias[i];
  }
}

void layer_norm_back(CSpan gain, const NormCache& c, CSpan dy, Vec& dgain, Vec& dbias,
                     std::span<double> dx) {
  const std::size_t n = dy.size();
  double mean_d = 0.0;
  double mean_dx = 0.0;
  Vec dxhat(n);
  for (std::size_t i = 0; i < n; ++i) {
    dgain[i] += dy[i] * c.xhat[i];
    dbias[i] += dy[i];
    dxhat[i] = dy[i] * gain[i];
    mean_d += dxhat[i];
    mean_dx += dxhat[i] * c.xhat[i];
  }
  mean_d /= static_cast<double>(n);
  mean_dx /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    dx[i] = c.rstd * (dxhat[i] - mean_d - c.xhat[i] * mean_dx);
  }
}

// Cross-entropy over logits[0, classes); dlogits gets softmax - onehot.
double softmax_xent(CSpan logits, int classes, int label, std::span<double> dlogits) {
  const auto c = static_cast<std::size_t>(classes);
  const double mx = *std::max_element(logits.begin(), logits.begin() + classes);
  double sum = 0.0;
  for (std::size_t j = 0; j < c; ++j) sum += std::exp(logits[j] - mx);
  const double lse = mx + std::log(sum);
  std::fill(dlogits.begin(), dlogits.end(), 0.0);
  for (std::size_t j = 0; j < c; ++j) dlogits[j] = std::exp(logits[j] - lse);
  dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return lse - logits[static_cast<std::size_t>(label)];
}

// --- MLP ------------------------------------------------------------------

struct MlpState {
  std::vector<Vec> inputs;  // input of each hidden layer
  std::vector<NormCache> norms;
  std::vector<Vec> acts;  // tanh outputs
  Vec head_input;
};

void mlp_forward(const Architecture& a, const std::vector<ParamInfo>& layout, const ParamSet& p,
                 CSpan x, std::span<double> logits, MlpState& s) {
  const std::size_t layers = a.hidden.size();
  s.inputs.resize(layers);
  s.norms.resize(layers);
  s.acts.resize(layers);
  Vec h(x.begin(), x.end());
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t base = 4 * l;
    const auto width = static_cast<std::size_t>(a.hidden[l]);
    s.inputs[l] = h;
    Vec z(width);
    linear(p[base], p[base + 1], h, z);
    require_finite(z, layout, base);
    Vec n(width);
    layer_norm(p[base + 2], p[base + 3], z, n, s.norms[l]);
    require_finite(n, layout, base + 2);
    for (double& v : n) v = std::tanh(v);
    s.acts[l] = n;
    h = std::move(n);
  }
  linear(p[4 * layers], p[4 * layers + 1], h, logits);
  require_finite(logits, layout, 4 * layers);
  s.head_input = std::move(h);
}

void mlp_backward(const Architecture& a, const ParamSet& p, const MlpState& s, CSpan dlogits,
                  GradSet& g) {
  const std::size_t layers = a.hidden.size();
  const std::size_t head = 4 * layers;
  Vec dh(layers == 0 ? 0 : s.head_input.size());
  linear_back(p[head], s.head_input, dlogits, g[head], &g[head + 1], dh);
  for (std::size_t l = layers; l-- > 0;) {
    const std::size_t base = 4 * l;
    const Vec& act = s.acts[l];
    Vec dn(act.size());
    for (std::size_t i = 0; i < act.size(); ++i) dn[i] = dh[i] * (1.0 - act[i] * act[i]);
    Vec dz(act.size());
    layer_norm_back(p[base + 2], s.norms[l], dn, g[base + 2], g[base + 3], dz);
    Vec dprev(l == 0 ? 0 : s.inputs[l].size());
    linear_back(p[base], s.inputs[l], dz, g[base], &g[base + 1], dprev);
    dh = std::move(dprev);
  }
}

// --- Attention ------------------------------------------------------------

enum AttnParam : std::size_t {
  kEmbed,
  kEmbedPos,
  kNorm1,
  kNorm1Bias,
  kQ,
  kK,
  kV,
  kO,
  kNorm2,
  kNorm2Bias,
  kUp,
  kUpBias,
  kDown,
  kDownBias,
  kNormF,
  kNormFBias,
  kHead,
  kHeadBias,
  kAttnParamCount
};

struct AttnState {
  std::vector<Vec> x, e, a, q, k, v, o, h, b, u, m, gout;
  std::vector<NormCache> n1, n2;
  std::vector<Vec> prob;  // T x T
  Vec pooled;
  Vec f;
  NormCache nf;
};

void attn_forward(const Architecture& a, const std::vector<ParamInfo>& layout, const ParamSet& p,
                  CSpan x, std::span<double> logits, AttnState& s) {
  const auto T = static_cast<std::size_t>(a.tokens);
  const auto D = static_cast<std::size_t>(a.model_dim);
  const auto F = static_cast<std::size_t>(a.ffn_dim);
  const std::size_t P = x.size() / T;
  for (auto* vs : {&s.x, &s.e, &s.a, &s.q, &s.k, &s.v, &s.o, &s.h, &s.b, &s.u, &s.m, &s.gout,
                   &s.prob}) {
    vs->resize(T);
  }
  s.n1.resize(T);
  s.n2.resize(T);

  for (std::size_t t = 0; t < T; ++t) {
    s.x[t].assign(x.begin() + static_cast<std::ptrdiff_t>(t * P),
                  x.begin() + static_cast<std::ptrdiff_t>((t + 1) * P));
    s.e[t].resize(D);
    // Per-position bias doubles as a learned positional embedding.
    linear(p[kEmbed], p[kEmbedPos].subspan(t * D, D), s.x[t], s.e[t]);
    require_finite(s.e[t], layout, kEmbed);
    s.a[t].resize(D);
    layer_norm(p[kNorm1], p[kNorm1Bias], s.e[t], s.a[t], s.n1[t]);
    require_finite(s.a[t], layout, kNorm1);
    s.q[t].resize(D);
    s.k[t].resize(D);
    s.v[t].resize(D);
    matvec(p[kQ], s.a[t], s.q[t]);
    require_finite(s.q[t], layout, kQ);
    matvec(p[kK], s.a[t], s.k[t]);
    require_finite(s.k[t], layout, kK);
    matvec(p[kV], s.a[t], s.v[t]);
    require_finite(s.v[t], layout, kV);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (std::size_t t = 0; t < T; ++t) {
    Vec& pr = s.prob[t];
    pr.resize(T);
    for (std::size_t r = 0; r < T; ++r) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += s.q[t][d] * s.k[r][d];
      pr[r] = dot * scale;
    }
    const double mx = *std::max_element(pr.begin(), pr.end());
    double sum = 0.0;
    for (double& v : pr) sum += (v = std::exp(v - mx));
    for (double& v : pr) v /= sum;
    require_finite(pr, layout, kK);
    s.o[t].assign(D, 0.0);
    for (std::size_t r = 0; r < T; ++r) {
      for (std::size_t d = 0; d < D; ++d) s.o[t][d] += pr[r] * s.v[r][d];
    }
    Vec u(D);
    matvec(p[kO], s.o[t], u);
    require_finite(u, layout, kO);
    s.h[t].resize(D);
    for (std::size_t d = 0; d < D; ++d) s.h[t][d] = s.e[t][d] + u[d];

    s.b[t].resize(D);
    layer_norm(p[kNorm2], p[kNorm2Bias], s.h[t], s.b[t], s.n2[t]);
    require_finite(s.b[t], layout, kNorm2);
    s.u[t].resize(F);
    linear(p[kUp], p[kUpBias], s.b[t], s.u[t]);
    require_finite(s.u[t], layout, kUp);
    for (double& v : s.u[t]) v = std::tanh(v);
    s.m[t].resize(D);
    linear(p[kDown], p[kDownBias], s.u[t], s.m[t]);
    require_finite(s.m[t], layout, kDown);
    s.gout[t].resize(D);
    for (std::size_t d = 0; d < D; ++d) s.gout[t][d] = s.h[t][d] + s.m[t][d];
  }

  s.pooled.assign(D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) s.pooled[d] += s.gout[t][d] / static_cast<double>(T);
  }
  s.f.resize(D);
  layer_norm(p[kNormF], p[kNormFBias], s.pooled, s.f, s.nf);
  require_finite(s.f, layout, kNormF);
  linear(p[kHead], p[kHeadBias], s.f, logits);
  require_finite(logits, layout, kHead);
}

void attn_backward(const Architecture& a, const ParamSet& p, const AttnState& s, CSpan dlogits,
                   GradSet& g) {
  const auto T = static_cast<std::size_t>(a.tokens);
  const auto D = static_cast<std::size_t>(a.model_dim);
  const auto F = static_cast<std::size_t>(a.ffn_dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  Vec df(D);
  linear_back(p[kHead], s.f, dlogits, g[kHead], &g[kHeadBias], df);
  Vec dpooled(D);
  layer_norm_back(p[kNormF], s.nf, df, g[kNormF], g[kNormFBias], dpooled);

  std::vector<Vec> dh(T, Vec(D)), dout(T, Vec(D));
  for (std::size_t t = 0; t < T; ++t) {
    Vec dg(D);
    for (std::size_t d = 0; d < D; ++d) dg[d] = dpooled[d] / static_cast<double>(T);
    Vec du(F);
    linear_back(p[kDown], s.u[t], dg, g[kDown], &g[kDownBias], du);
    for (std::size_t i = 0; i < F; ++i) du[i] *= 1.0 - s.u[t][i] * s.u[t][i];
    Vec db(D);
    linear_back(p[kUp], s.b[t], du, g[kUp], &g[kUpBias], db);
    Vec dh_norm(D);
    layer_norm_back(p[kNorm2], s.n2[t], db, g[kNorm2], g[kNorm2Bias], dh_norm);
    for (std::size_t d = 0; d < D; ++d) dh[t][d] = dg[d] + dh_norm[d];
    // h = e + W_o o
    linear_back(p[kO], s.o[t], dh[t], g[kO], nullptr, dout[t]);
  }

  std::vector<Vec> dq(T, Vec(D, 0.0)), dk(T, Vec(D, 0.0)), dv(T, Vec(D, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    const Vec& pr = s.prob[t];
    Vec dp(T);
    for (std::size_t r = 0; r < T; ++r) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += dout[t][d] * s.v[r][d];
      dp[r] = dot;
      for (std::size_t d = 0; d < D; ++d) dv[r][d] += pr[r] * dout[t][d];
    }
    double inner = 0.0;
    for (std::size_t r = 0; r < T; ++r) inner += pr[r] * dp[r];
    for (std::size_t r = 0; r < T; ++r) {
      const double ds = pr[r] * (dp[r] - inner) * scale;
      for (std::size_t d = 0; d < D; ++d) {
        dq[t][d] += ds * s.k[r][d];
        dk[r][d] += ds * s.q[t][d];
      }
    }
  }

  for (std::size_t t = 0; t < T; ++t) {
    Vec da(D, 0.0), tmp(D);
    linear_back(p[kQ], s.a[t], dq[t], g[kQ], nullptr, tmp);
    for (std::size_t d = 0; d < D; ++d) da[d] += tmp[d];
    linear_back(p[kK], s.a[t], dk[t], g[kK], nullptr, tmp);
    for (std::size_t d = 0; d < D; ++d) da[d] += tmp[d];
    linear_back(p[kV], s.a[t], dv[t], g[kV], nullptr, tmp);
    for (std::size_t d = 0; d < D; ++d) da[d] += tmp[d];
    Vec de(D);
    layer_norm_back(p[kNorm1], s.n1[t], da, g[kNorm1], g[kNorm1Bias], de);
    for (std::size_t d = 0; d < D; ++d) de[d] += dh[t][d];
    linear_back(p[kEmbed], s.x[t], de, g[kEmbed], nullptr, {});
    for (std::size_t d = 0; d < D; ++d) g[kEmbedPos][t * D + d] += de[d];
  }
}

}  // namespace

std::vector<ParamInfo> parameter_layout(const Architecture& a) {
  if (a.input_dim <= 0 || a.num_outputs < 2) throw BundleError("invalid architecture dimensions");
  const auto C = static_cast<std::size_t>(a.num_outputs);
  std::vector<ParamInfo> out;
  if (a.kind == ArchKind::Mlp) {
    auto prev = static_cast<std::size_t>(a.input_dim);
    int layer = 0;
    for (int width : a.hidden) {
      const auto h = static_cast<std::size_t>(width);
      out.push_back(param(layer, "mlp.up_proj", {h, prev}));
      out.push_back(param(layer, "mlp.up_proj.bias", {h}));
      out.push_back(param(layer, "norm.weight", {h}));
      out.push_back(param(layer, "norm.bias", {h}));
      prev = h;
      ++layer;
    }
    out.push_back(param(layer, "lm_head", {C, prev}));
    out.push_back(param(layer, "lm_head.bias", {C}));
    return out;
  }

  if (a.tokens <= 0 || a.input_dim % a.tokens != 0) {
    throw BundleError("attention input_dim must be a multiple of tokens");
  }
  const auto P = static_cast<std::size_t>(a.input_dim / a.tokens);
  const auto D = static_cast<std::size_t>(a.model_dim);
  const auto F = static_cast<std::size_t>(a.ffn_dim);
  out = {
      param(0, "embed", {D, P}),
      param(0, "embed.pos", {static_cast<std::size_t>(a.tokens), D}),
      param(1, "input_norm.weight", {D}),
      param(1, "input_norm.bias", {D}),
      param(1, "attn.q_proj", {D, D}),
      param(1, "attn.k_proj", {D, D}),
      param(1, "attn.v_proj", {D, D}),
      param(1, "attn.o_proj", {D, D}),
      param(1, "post_attention_norm.weight", {D}),
      param(1, "post_attention_norm.bias", {D}),
      param(1, "mlp.up_proj", {F, D}),
      param(1, "mlp.up_proj.bias", {F}),
      param(1, "mlp.down_proj", {D, F}),
      param(1, "mlp.down_proj.bias", {D}),
      param(2, "final_norm.weight", {D}),
      param(2, "final_norm.bias", {D}),
      param(2, "lm_head", {C, D}),
      param(2, "lm_head.bias", {C}),
  };
  return out;
}

ParamSet params_of(const ModelBundle& bundle) {
  ParamSet p;
  p.reserve(bundle.size());
  for (std::size_t t = 0; t < bundle.size(); ++t) p.push_back(bundle.effective(t));
  return p;
}

ParamSet params_of(const std::vector<std::vector<double>>& buffers) {
  return {buffers.begin(), buffers.end()};
}

GradSet zero_grads(const Architecture& arch) {
  GradSet g;
  for (const auto& info : parameter_layout(arch)) {
    std::size_t n = 1;
    for (auto d : info.shape) n *= d;
    g.emplace_back(n, 0.0);
  }
  return g;
}

Network::Network(Architecture arch) : arch_(std::move(arch)), layout_(parameter_layout(arch_)) {}

void Network::check_params(const ParamSet& p) const {
  if (p.size() != layout_.size()) {
    throw BundleError(fmt::format("network expects {} tensors, got {}", layout_.size(), p.size()));
  }
  for (std::size_t i = 0; i < p.size(); ++i) {
    std::size_t n = 1;
    for (auto d : layout_[i].shape) n *= d;
    if (p[i].size() != n) {
      throw BundleError(fmt::format("tensor '{}' has {} elements, expected {}", layout_[i].name,
                                    p[i].size(), n));
    }
  }
}

void Network::forward(const ParamSet& p, std::span<const double> x,
                      std::span<double> logits) const {
  check_params(p);
  if (x.size() != static_cast<std::size_t>(arch_.input_dim)) {
    throw std::invalid_argument("input width does not match the architecture");
  }
  if (arch_.kind == ArchKind::Mlp) {
    MlpState s;
    mlp_forward(arch_, layout_, p, x, logits, s);
  } else {
    AttnState s;
    attn_forward(arch_, layout_, p, x, logits, s);
  }
}

double Network::backward(const ParamSet& p, std::span<const double> x, int label, int num_classes,
                         double scale, GradSet& grads) const {
  check_params(p);
  if (num_classes < 2 || num_classes > arch_.num_outputs || label < 0 || label >= num_classes) {
    throw std::invalid_argument("label or class count out of range for this head");
  }
  Vec logits(static_cast<std::size_t>(arch_.num_outputs));
  Vec dlogits(logits.size());
  MlpState ms;
  AttnState as;
  if (arch_.kind == ArchKind::Mlp) {
    mlp_forward(arch_, layout_, p, x, logits, ms);
  } else {
    attn_forward(arch_, layout_, p, x, logits, as);
  }
  const double loss = softmax_xent(logits, num_classes, label, dlogits);
  if (!std::isfinite(loss)) throw NumericalRuntimeError(layout_[layout_.size() - 2].name);
  for (double& d : dlogits) d *= scale;
  if (arch_.kind == ArchKind::Mlp) {
    mlp_backward(arch_, p, ms, dlogits, grads);
  } else {
    attn_backward(arch_, p, as, dlogits, grads);
  }
  return loss;
}

LossAndGrads loss_and_grads(const Network& net, const ParamSet& p, const Batch& batch,
                            int num_classes) {
  LossAndGrads out{0.0, zero_grads(net.architecture())};
  if (batch.size() == 0) return out;
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.loss += net.backward(p, batch.row(i), batch.labels[i], num_classes, scale, out.grads);
  }
  out.loss *= scale;
  return out;
}

double mean_loss(const Network& net, const ParamSet& p, const Batch& batch, int num_classes) {
  Vec logits(static_cast<std::size_t>(net.architecture().num_outputs));
  Vec scratch(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    net.forward(p, batch.row(i), logits);
    total += softmax_xent(logits, num_classes, batch.labels[i], scratch);
  }
  return batch.size() == 0 ? 0.0 : total / static_cast<double>(batch.size());
}

double accuracy(const Network& net, const ParamSet& p, const Batch& batch, int num_classes) {
  if (batch.size() == 0) return 0.0;
  Vec logits(static_cast<std::size_t>(net.architecture().num_outputs));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    net.forward(p, batch.row(i), logits);
    const auto best = std::max_element(logits.begin(), logits.begin() + num_classes) - logits.begin();
    if (best == batch.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(batch.size());
}

double compute_gradients(ModelBundle& bundle, const Batch& batch, int num_classes) {
  const Network net(bundle.architecture());
  auto r = loss_and_grads(net, params_of(bundle), batch, num_classes);
  bundle.set_gradients(std::move(r.grads));
  return r.loss;
}

double evaluate(const ModelBundle& bundle, const Batch& batch, int num_classes) {
  const Network net(bundle.architecture());
  return accuracy(net, params_of(bundle), batch, num_classes);
}

}  // namespace sbfa
