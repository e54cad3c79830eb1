// SPDX-License-Identifier: Apache-2.0
#include "bwta/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bwta {

namespace {

// a[m x k] * b[n x k]^T
template <typename T>
Matrix<T> mm_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("mm_nt: " + shape_of(a) + " vs " + shape_of(b));
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t m = 0; m < a.rows(); ++m) {
    const auto ar = a.row(m);
    for (std::size_t n = 0; n < b.rows(); ++n) {
      const auto br = b.row(n);
      double acc = 0.0;
      for (std::size_t k = 0; k < ar.size(); ++k) acc += double(ar[k]) * br[k];
      out(m, n) = static_cast<T>(acc);
    }
  }
  return out;
}

// a[m x k] * b[k x n]
template <typename T>
Matrix<T> mm_nn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("mm_nn: " + shape_of(a) + " vs " + shape_of(b));
  return mm_nt(a, transpose(b));
}

// a[k x m]^T * b[k x n]
template <typename T>
Matrix<T> mm_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("mm_tn: " + shape_of(a) + " vs " + shape_of(b));
  return mm_nt(transpose(a), transpose(b));
}

template <typename T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: " + shape_of(a) + " vs " + shape_of(b));
  Matrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

void accumulate(DoubleMatrix& into, const DoubleMatrix& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

// Parameter gradients are stored in float next to their values.
void accumulate(DenseMatrix& into, const DoubleMatrix& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] = static_cast<float>(into[i] + g[i]);
}

template <typename T>
Matrix<T> cols_slice(const Matrix<T>& m, std::size_t first, std::size_t count) {
  Matrix<T> out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = m(r, first + c);
  return out;
}

template <typename T>
void put_cols(Matrix<T>& m, const Matrix<T>& part, std::size_t first) {
  for (std::size_t r = 0; r < part.rows(); ++r)
    for (std::size_t c = 0; c < part.cols(); ++c) m(r, first + c) = part(r, c);
}

DoubleMatrix rows_slice(const DoubleMatrix& m, std::size_t first, std::size_t count) {
  DoubleMatrix out(count, m.cols());
  std::copy_n(m.data() + first * m.cols(), count * m.cols(), out.data());
  return out;
}

void put_rows(DoubleMatrix& m, const DoubleMatrix& part, std::size_t first) {
  std::copy_n(part.data(), part.size(), m.data() + first * m.cols());
}

template <typename T>
Matrix<T> softmax_impl(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (auto& v : o) v *= inv;
  }
  return out;
}

template <typename T>
Matrix<T> relu_impl(const Matrix<T>& x) {
  Matrix<T> out = x;
  for (auto& v : out.values()) v = std::max(v, T(0));
  return out;
}

// out[n][o] = factor * ints[o][n]
DenseMatrix scaled_transpose(const IntMatrix& ints, float factor) {
  DenseMatrix out(ints.cols(), ints.rows());
  for (std::size_t o = 0; o < ints.rows(); ++o)
    for (std::size_t n = 0; n < ints.cols(); ++n) out(n, o) = factor * static_cast<float>(ints(o, n));
  return out;
}

DoubleMatrix signed_weight(const IntMatrix& signs, float scale) {
  DoubleMatrix out(signs.rows(), signs.cols());
  for (std::size_t i = 0; i < signs.size(); ++i) out[i] = double(scale) * signs[i];
  return out;
}

DenseMatrix scaled(const IntMatrix& ints, float factor) {
  DenseMatrix out(ints.rows(), ints.cols());
  for (std::size_t i = 0; i < ints.size(); ++i) out[i] = factor * static_cast<float>(ints[i]);
  return out;
}

BasicSteGrad<double> quant_backward(const DoubleMatrix& a, const QuantState& state, const DoubleMatrix& residual,
                                    const DoubleMatrix& upstream) {
  return residual.empty() ? ste_backward(a, state, upstream) : surrogate_backward(a, state, residual, upstream);
}

void require_positive(float s, const char* what) {
  if (!(s > 0.0f)) throw std::invalid_argument(std::string(what) + ": scales must be positive");
}

}  // namespace

// ---------------------------------------------------------------------------

DoubleMatrix QuantTrace::apply(std::size_t slot, const DoubleMatrix& a, const QuantState& state,
                               DoubleMatrix* residual) {
  if (collect) {
    if (collect->size() <= slot) collect->resize(slot + 1);
    auto& bucket = (*collect)[slot];
    for (double v : a.values()) bucket.push_back(static_cast<float>(v));
  }
  if (!quantize || slot >= quantized_slots) return a;
  if (pattern) {
    const double lo = state.mode.lo(), hi = state.mode.hi();
    for (double x : a.values()) {
      const double v = x / state.scale;
      pattern->push_back(v < lo ? 1 : v > hi ? 2 : 0);
    }
  }
  switch (residuals) {
    case Residuals::Off:
      return fake_quantize(a, state);
    case Residuals::Record:
      frozen.push_back(rounding_residual(a, state));
      return fake_quantize(a, state);
    case Residuals::Replay: {
      if (cursor >= frozen.size()) throw std::logic_error("QuantTrace: replay ran past the recording");
      const DoubleMatrix& r = frozen[cursor++];
      if (r.rows() != a.rows() || r.cols() != a.cols())
        throw std::logic_error("QuantTrace: replay shape " + shape_of(a) + " vs recorded " + shape_of(r));
      if (residual) *residual = r;
      return surrogate_dequantize(a, state, r);
    }
  }
  return a;
}

// ---------------------------------------------------------------------------

DenseMatrix softmax_rows(const DenseMatrix& x) { return softmax_impl(x); }
DoubleMatrix softmax_rows(const DoubleMatrix& x) { return softmax_impl(x); }
DenseMatrix relu(const DenseMatrix& x) { return relu_impl(x); }
DoubleMatrix relu(const DoubleMatrix& x) { return relu_impl(x); }

DenseLinear::DenseLinear(std::size_t in, std::size_t out, std::uint64_t seed)
    : weight(random_matrix(out, in, Normal{0.0, 1.0 / std::sqrt(double(in))}, seed)),
      bias(DenseMatrix(1, out)) {}

namespace {

template <typename T>
Matrix<T> dense_forward(const DenseLinear& l, const Matrix<T>& x) {
  if (x.cols() != l.in_features())
    throw std::invalid_argument("DenseLinear: input " + shape_of(x) + " vs weight " + shape_of(l.weight.value));
  Matrix<T> y(x.rows(), l.out_features());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t o = 0; o < y.cols(); ++o) {
      double acc = l.bias.value[o];
      for (std::size_t i = 0; i < x.cols(); ++i) acc += double(x(r, i)) * l.weight.value(o, i);
      y(r, o) = static_cast<T>(acc);
    }
  return y;
}

template <typename T>
Matrix<T> layer_norm_forward(const LayerNorm& ln, const Matrix<T>& x, LayerNorm::Cache* cache) {
  if (x.cols() != ln.gamma.value.cols())
    throw std::invalid_argument("LayerNorm: input " + shape_of(x) + " for dim " +
                                std::to_string(ln.gamma.value.cols()));
  const std::size_t n = x.cols();
  Matrix<T> y(x.rows(), n);
  if (cache) *cache = {DoubleMatrix(x.rows(), n), std::vector<double>(x.rows())};
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto in = x.row(r);
    double mean = 0.0;
    for (T v : in) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= double(n);
    const double is = 1.0 / std::sqrt(var + ln.eps);
    if (cache) cache->inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double xhat = (in[c] - mean) * is;
      if (cache) cache->xhat(r, c) = xhat;
      y(r, c) = static_cast<T>(ln.gamma.value[c] * xhat + ln.beta.value[c]);
    }
  }
  return y;
}

}  // namespace

DenseMatrix DenseLinear::forward(const DenseMatrix& x) const { return dense_forward(*this, x); }
DoubleMatrix DenseLinear::forward(const DoubleMatrix& x) const { return dense_forward(*this, x); }

DoubleMatrix DenseLinear::backward(const DoubleMatrix& x, const DoubleMatrix& dy) {
  accumulate(weight.grad, mm_tn(dy, x));
  for (std::size_t r = 0; r < dy.rows(); ++r)
    for (std::size_t c = 0; c < dy.cols(); ++c) bias.grad[c] = static_cast<float>(bias.grad[c] + dy(r, c));
  return mm_nn(dy, to_double(weight.value));
}

LayerNorm::LayerNorm(std::size_t dim) : gamma(DenseMatrix(1, dim, 1.0f)), beta(DenseMatrix(1, dim)) {}

DenseMatrix LayerNorm::forward(const DenseMatrix& x) const { return layer_norm_forward(*this, x, nullptr); }

DoubleMatrix LayerNorm::forward(const DoubleMatrix& x, Cache* cache) const {
  return layer_norm_forward(*this, x, cache);
}

DoubleMatrix LayerNorm::backward(const Cache& cache, const DoubleMatrix& dy) {
  const std::size_t n = dy.cols();
  DoubleMatrix dx(dy.rows(), n);
  std::vector<double> g(n);
  for (std::size_t r = 0; r < dy.rows(); ++r) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      gamma.grad[c] = static_cast<float>(gamma.grad[c] + dy(r, c) * cache.xhat(r, c));
      beta.grad[c] = static_cast<float>(beta.grad[c] + dy(r, c));
      g[c] = dy(r, c) * gamma.value[c];
      sum_g += g[c];
      sum_gx += g[c] * cache.xhat(r, c);
    }
    for (std::size_t c = 0; c < n; ++c)
      dx(r, c) = cache.inv_std[r] / double(n) * (double(n) * g[c] - sum_g - cache.xhat(r, c) * sum_gx);
  }
  return dx;
}

// ---------------------------------------------------------------------------

BwtaLinear::BwtaLinear(DenseMatrix weight, QuantState act_state) : act{act_state}, weight_(std::move(weight)) {
  refresh();
}

BwtaLinear::BwtaLinear(PackedBinaryMatrix packed, float weight_scale, QuantState act_state)
    : act{act_state}, weight_scale_(weight_scale), packed_(std::move(packed)) {
  if (packed_.kind != BinaryKind::SignNegIsOne)
    throw std::invalid_argument("BwtaLinear: packed weight must be a sign matrix");
  require_positive(weight_scale, "BwtaLinear");
  signs_ = unpack(packed_);
  weight_q_ = signed_weight(signs_, weight_scale_);
}

void BwtaLinear::refresh() {
  if (!has_latent()) throw std::logic_error("BwtaLinear: no latent weight to refresh from");
  auto ws = weight_sign_quantize(weight_.value);
  signs_ = std::move(ws.signs);
  weight_scale_ = ws.scale;
  weight_mean_ = ws.mean;
  packed_ = pack_sign(signs_);
  weight_q_ = signed_weight(signs_, weight_scale_);
  if (weight_.grad.rows() != weight_.value.rows() || weight_.grad.cols() != weight_.value.cols())
    weight_.zero_grad();
}

template <typename M>
void BwtaLinear::check_input(const M& a) const {
  if (a.cols() != in_features())
    throw std::invalid_argument("BwtaLinear: input " + shape_of(a) + " for weight " +
                                shape_string(out_features(), in_features()));
}

IntMatrix BwtaLinear::quantized_input(const DenseMatrix& a) const {
  check_input(a);
  return quantize(a, act.state);
}

DenseMatrix BwtaLinear::forward(const DenseMatrix& a, const KernelConfig& cfg) const {
  check_input(a);
  const QuantMode& mode = act.state.mode;
  PackedTernaryMatrix packed_a;
  if (mode.is_ternary()) {
    packed_a = pack_ternary(a, act.state.scale);
  } else if (mode.is_boolean()) {
    packed_a = bool_as_ternary(pack_bool(a, act.state.scale));
  } else {
    throw std::invalid_argument("BwtaLinear: packed forward needs a ternary or bool input, got " + mode.name());
  }
  return scaled_transpose(gemm_case1(packed_, packed_a, cfg), output_scale());
}

DenseMatrix BwtaLinear::forward_reference(const DenseMatrix& a) const {
  return scaled_transpose(gemm_int_oracle(signs_, quantized_input(a)), output_scale());
}

DenseMatrix BwtaLinear::forward_dequantized(const DenseMatrix& a) const {
  const DenseMatrix prod = gemm_f32(to_dense(signs_), to_dense(quantized_input(a)));
  DenseMatrix out(prod.cols(), prod.rows());
  const float f = output_scale();
  for (std::size_t o = 0; o < prod.rows(); ++o)
    for (std::size_t n = 0; n < prod.cols(); ++n) out(n, o) = f * prod(o, n);
  return out;
}

DoubleMatrix BwtaLinear::forward_train(const DoubleMatrix& a, std::size_t slot, QuantTrace& trace,
                                       Cache* cache) const {
  check_input(a);
  if (!has_latent()) throw std::logic_error("BwtaLinear: training needs the latent weight");
  DoubleMatrix residual;
  DoubleMatrix aq = trace.apply(slot, a, act.state, &residual);
  DoubleMatrix out = mm_nt(aq, trace.quantize ? weight_q_ : to_double(weight_.value));
  if (cache) *cache = {a, std::move(aq), std::move(residual)};
  return out;
}

DoubleMatrix BwtaLinear::backward(const Cache& cache, const DoubleMatrix& dy, const QuantTrace& trace) {
  // Weight STE: d latent W = d(s_W sign(W - mu)), s_W held constant.
  accumulate(weight_.grad, mm_tn(dy, cache.input_q));
  DoubleMatrix d_aq = mm_nn(dy, trace.quantize ? weight_q_ : to_double(weight_.value));
  if (!trace.quantize) return d_aq;
  auto g = quant_backward(cache.input, act.state, cache.residual, d_aq);
  act.grad = static_cast<float>(act.grad + g.grad_scale);
  return std::move(g.grad_input);
}

// ---------------------------------------------------------------------------

DenseMatrix attention_scores(const DenseMatrix& q, const DenseMatrix& k, float s_q, float s_k,
                             const KernelConfig& cfg) {
  if (q.cols() != k.cols() || q.cols() == 0)
    throw std::invalid_argument("attention_scores: Q " + shape_of(q) + " vs K " + shape_of(k));
  require_positive(std::min(s_q, s_k), "attention_scores");
  const float f = s_q * s_k / std::sqrt(static_cast<float>(q.cols()));
  return scaled(gemm_case3(pack_ternary(q, s_q), pack_ternary(k, s_k), cfg), f);
}

DenseMatrix attention_scores_reference(const DenseMatrix& q, const DenseMatrix& k, float s_q,
                                       float s_k) {
  if (q.cols() != k.cols() || q.cols() == 0)
    throw std::invalid_argument("attention_scores: Q " + shape_of(q) + " vs K " + shape_of(k));
  const float f = s_q * s_k / std::sqrt(static_cast<float>(q.cols()));
  return scaled(gemm_int_oracle(quantize(q, QuantState(s_q, QuantMode::ternary())),
                                quantize(k, QuantState(s_k, QuantMode::ternary()))),
                f);
}

namespace {

void check_context_args(const DenseMatrix& att, const DenseMatrix& v, float s_att, float s_v) {
  if (att.cols() != v.rows())
    throw std::invalid_argument("attention_context: Att " + shape_of(att) + " vs V " + shape_of(v));
  require_positive(std::min(s_att, s_v), "attention_context");
  for (std::size_t i = 0; i < att.size(); ++i)
    if (!(att[i] >= 0.0f))
      throw std::invalid_argument("attention_context: negative attention entry at (" +
                                  std::to_string(i / att.cols()) + ", " + std::to_string(i % att.cols()) + ")");
}

}  // namespace

DenseMatrix attention_context(const DenseMatrix& att, const DenseMatrix& v, float s_att, float s_v,
                              const KernelConfig& cfg) {
  check_context_args(att, v, s_att, s_v);
  return scaled(gemm_case2(pack_bool(att, s_att), pack_ternary(transpose(v), s_v), cfg), s_att * s_v);
}

DenseMatrix attention_context_reference(const DenseMatrix& att, const DenseMatrix& v, float s_att,
                                        float s_v) {
  check_context_args(att, v, s_att, s_v);
  return scaled(gemm_int_oracle(quantize(att, QuantState(s_att, QuantMode::boolean())),
                                quantize(transpose(v), QuantState(s_v, QuantMode::ternary()))),
                s_att * s_v);
}

// ---------------------------------------------------------------------------

void BlockConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_ff == 0)
    throw std::invalid_argument("BlockConfig: dimensions must be positive");
  if (d_model % heads != 0)
    throw std::invalid_argument("BlockConfig: d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
}

const char* slot_name(std::size_t slot) {
  static constexpr const char* kNames[kSlotCount] = {
      "q_proj.in", "k_proj.in", "v_proj.in", "attn.q",    "attn.k",
      "attn.v",    "attn.prob", "o_proj.in", "ffn1.in",   "ffn2.in"};
  if (slot >= kSlotCount) throw std::out_of_range("slot_name: " + std::to_string(slot));
  return kNames[slot];
}

TransformerBlock::TransformerBlock(const BlockConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  Rng rng(seed);
  auto latent = [&](std::size_t out, std::size_t in) {
    const double sd = cfg.unit_gain_init         ? std::sqrt(double(out))
                      : cfg.weight_init_std > 0 ? cfg.weight_init_std
                                                : 1.0 / std::sqrt(double(in));
    return random_matrix(out, in, Normal{0.0, sd}, rng.next_u64());
  };
  const QuantState tern(1.0f, QuantMode::ternary());
  const QuantState boolean(1.0f, QuantMode::boolean());
  q_proj = BwtaLinear(latent(d, d), tern);
  k_proj = BwtaLinear(latent(d, d), tern);
  v_proj = BwtaLinear(latent(d, d), tern);
  o_proj = BwtaLinear(latent(d, d), tern);
  ffn1 = BwtaLinear(latent(cfg.d_ff, d), tern);
  ffn2 = BwtaLinear(latent(d, cfg.d_ff), boolean);
  attn.q = {tern};
  attn.k = {tern};
  attn.v = {tern};
  attn.prob = {boolean};
  attn.heads = cfg.heads;
  attn.head_dim = cfg.head_dim();
  ln1 = LayerNorm(d);
  ln2 = LayerNorm(d);
}

ScaleParam& TransformerBlock::scale(std::size_t slot) {
  switch (slot) {
    case kSlotQProjIn: return q_proj.act;
    case kSlotKProjIn: return k_proj.act;
    case kSlotVProjIn: return v_proj.act;
    case kSlotQuery: return attn.q;
    case kSlotKey: return attn.k;
    case kSlotValue: return attn.v;
    case kSlotProb: return attn.prob;
    case kSlotOProjIn: return o_proj.act;
    case kSlotFfn1In: return ffn1.act;
    case kSlotFfn2In: return ffn2.act;
    default: throw std::out_of_range("TransformerBlock::scale: slot " + std::to_string(slot));
  }
}

const ScaleParam& TransformerBlock::scale(std::size_t slot) const {
  return const_cast<TransformerBlock*>(this)->scale(slot);
}

void TransformerBlock::set_levels(int levels) {
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    auto& st = scale(s).state;
    st.mode = st.mode.with_levels(levels);
  }
}

int TransformerBlock::levels() const {
  const int l = scale(0).state.mode.levels;
  for (std::size_t s = 1; s < kSlotCount; ++s)
    if (scale(s).state.mode.levels != l) throw std::logic_error("TransformerBlock: mixed quantizer levels");
  return l;
}

void TransformerBlock::calibrate(const std::vector<DenseMatrix>& inputs, float factor) {
  std::vector<DoubleMatrix> xs;
  for (const auto& x : inputs) xs.push_back(to_double(x));
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    std::vector<std::vector<float>> seen(kSlotCount);
    QuantTrace trace;
    trace.quantized_slots = s;
    trace.collect = &seen;
    for (const auto& x : xs) forward_train(x, trace, nullptr);
    const std::size_t n = seen[s].size();
    if (n == 0) continue;
    const DenseMatrix a(1, n, std::move(seen[s]));
    if (std::all_of(a.values().begin(), a.values().end(), [](float v) { return v == 0.0f; })) continue;
    scale(s).state.set_scale(factor * activation_scale_init(a));
  }
}

void TransformerBlock::refresh_weights() {
  for (BwtaLinear* l : {&q_proj, &k_proj, &v_proj, &o_proj, &ffn1, &ffn2}) l->refresh();
}

void TransformerBlock::visit_params(const std::string& prefix, const ParamVisitor& visit) {
  const std::pair<const char*, BwtaLinear*> linears[] = {{"q_proj", &q_proj}, {"k_proj", &k_proj},
                                                         {"v_proj", &v_proj}, {"o_proj", &o_proj},
                                                         {"ffn1", &ffn1},     {"ffn2", &ffn2}};
  for (auto [name, l] : linears)
    visit(prefix + name + ".weight", ParamKind::BinaryWeight, l->weight().value.values(),
          l->weight().grad.values());
  for (auto [name, ln] : {std::pair{"ln1", &ln1}, std::pair{"ln2", &ln2}}) {
    visit(prefix + name + ".gamma", ParamKind::FullPrecision, ln->gamma.value.values(), ln->gamma.grad.values());
    visit(prefix + name + ".beta", ParamKind::FullPrecision, ln->beta.value.values(), ln->beta.grad.values());
  }
  for (std::size_t s = 0; s < kSlotCount; ++s) {
    auto& sp = scale(s);
    visit(prefix + slot_name(s) + ".scale", ParamKind::Scale, std::span<float>(&sp.state.scale, 1),
          std::span<float>(&sp.grad, 1));
  }
}

DenseMatrix TransformerBlock::forward(const DenseMatrix& x, const KernelConfig& kcfg) const {
  if (x.cols() != cfg_.d_model)
    throw std::invalid_argument("TransformerBlock: input " + shape_of(x) + " for d_model " +
                                std::to_string(cfg_.d_model));
  if (!quantized) {
    QuantTrace identity;
    identity.quantize = false;
    return to_float(forward_train(to_double(x), identity, nullptr));
  }
  for (std::size_t s = 0; s < kSlotCount; ++s)
    if (scale(s).state.mode.levels != 1)
      throw std::logic_error(std::string("TransformerBlock: packed inference needs L = 1, ") + slot_name(s) +
                             " is at " + scale(s).state.mode.name());

  const std::size_t dh = cfg_.head_dim();
  const DenseMatrix q = q_proj.forward(x, kcfg);
  const DenseMatrix k = k_proj.forward(x, kcfg);
  const DenseMatrix v = v_proj.forward(x, kcfg);
  DenseMatrix context(x.rows(), cfg_.d_model);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const auto scores = attention_scores(cols_slice(q, h * dh, dh), cols_slice(k, h * dh, dh),
                                         attn.q.state.scale, attn.k.state.scale, kcfg);
    const auto prob = softmax_rows(scores);
    put_cols(context,
             attention_context(prob, cols_slice(v, h * dh, dh), attn.prob.state.scale, attn.v.state.scale, kcfg),
             h * dh);
  }
  const DenseMatrix h1 = ln1.forward(add(x, o_proj.forward(context, kcfg)));
  const DenseMatrix f = ffn2.forward(relu(ffn1.forward(h1, kcfg)), kcfg);
  return ln2.forward(add(h1, f));
}

DoubleMatrix TransformerBlock::forward_train(const DoubleMatrix& x, QuantTrace& trace, Cache* cache) const {
  if (x.cols() != cfg_.d_model)
    throw std::invalid_argument("TransformerBlock: input " + shape_of(x) + " for d_model " +
                                std::to_string(cfg_.d_model));
  Cache local;
  Cache& c = cache ? *cache : local;
  const std::size_t t = x.rows(), dh = cfg_.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(double(dh));

  c.x = x;
  c.q = q_proj.forward_train(x, kSlotQProjIn, trace, &c.q_in);
  c.k = k_proj.forward_train(x, kSlotKProjIn, trace, &c.k_in);
  c.v = v_proj.forward_train(x, kSlotVProjIn, trace, &c.v_in);
  c.qq = trace.apply(kSlotQuery, c.q, attn.q.state, &c.res_q);
  c.kq = trace.apply(kSlotKey, c.k, attn.k.state, &c.res_k);
  c.vq = trace.apply(kSlotValue, c.v, attn.v.state, &c.res_v);

  c.prob = DoubleMatrix(cfg_.heads * t, t);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    DoubleMatrix s = mm_nt(cols_slice(c.qq, h * dh, dh), cols_slice(c.kq, h * dh, dh));
    for (auto& e : s.values()) e *= inv_sqrt_d;
    put_rows(c.prob, softmax_rows(s), h * t);
  }
  c.prob_q = trace.apply(kSlotProb, c.prob, attn.prob.state, &c.res_prob);

  c.context = DoubleMatrix(t, cfg_.d_model);
  for (std::size_t h = 0; h < cfg_.heads; ++h)
    put_cols(c.context, mm_nn(rows_slice(c.prob_q, h * t, t), cols_slice(c.vq, h * dh, dh)), h * dh);

  c.attn_out = o_proj.forward_train(c.context, kSlotOProjIn, trace, &c.o_in);
  c.h1 = ln1.forward(add(x, c.attn_out), &c.ln1);
  c.u = ffn1.forward_train(c.h1, kSlotFfn1In, trace, &c.f1_in);
  if (trace.pattern)
    for (double e : c.u.values()) trace.pattern->push_back(e > 0.0 ? 3 : 4);
  c.r = relu(c.u);
  c.f = ffn2.forward_train(c.r, kSlotFfn2In, trace, &c.f2_in);
  return ln2.forward(add(c.h1, c.f), &c.ln2);
}

DoubleMatrix TransformerBlock::backward(const Cache& c, const DoubleMatrix& dy, const QuantTrace& trace) {
  const std::size_t t = c.x.rows(), dh = cfg_.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(double(dh));

  const DoubleMatrix dz2 = ln2.backward(c.ln2, dy);
  DoubleMatrix dr = ffn2.backward(c.f2_in, dz2, trace);
  for (std::size_t i = 0; i < dr.size(); ++i)
    if (c.u[i] <= 0.0) dr[i] = 0.0;
  const DoubleMatrix dh1 = add(dz2, ffn1.backward(c.f1_in, dr, trace));
  const DoubleMatrix dz1 = ln1.backward(c.ln1, dh1);
  const DoubleMatrix dctx = o_proj.backward(c.o_in, dz1, trace);

  DoubleMatrix dprob_q(cfg_.heads * t, t), dvq(t, cfg_.d_model);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const DoubleMatrix dc = cols_slice(dctx, h * dh, dh);
    put_rows(dprob_q, mm_nt(dc, cols_slice(c.vq, h * dh, dh)), h * t);
    put_cols(dvq, mm_tn(rows_slice(c.prob_q, h * t, t), dc), h * dh);
  }

  auto through = [&](ScaleParam& sp, const DoubleMatrix& pre, const DoubleMatrix& res, const DoubleMatrix& up) {
    if (!trace.quantize) return up;
    auto g = quant_backward(pre, sp.state, res, up);
    sp.grad = static_cast<float>(sp.grad + g.grad_scale);
    return std::move(g.grad_input);
  };
  const DoubleMatrix dprob = through(attn.prob, c.prob, c.res_prob, dprob_q);

  DoubleMatrix dqq(t, cfg_.d_model), dkq(t, cfg_.d_model);
  for (std::size_t h = 0; h < cfg_.heads; ++h) {
    const DoubleMatrix p = rows_slice(c.prob, h * t, t);
    const DoubleMatrix dp = rows_slice(dprob, h * t, t);
    DoubleMatrix ds(t, t);
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < t; ++j) dot += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < t; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt_d;
    }
    put_cols(dqq, mm_nn(ds, cols_slice(c.kq, h * dh, dh)), h * dh);
    put_cols(dkq, mm_tn(ds, cols_slice(c.qq, h * dh, dh)), h * dh);
  }

  const DoubleMatrix dq = through(attn.q, c.q, c.res_q, dqq);
  const DoubleMatrix dk = through(attn.k, c.k, c.res_k, dkq);
  const DoubleMatrix dv = through(attn.v, c.v, c.res_v, dvq);

  DoubleMatrix dx = dz1;
  accumulate(dx, q_proj.backward(c.q_in, dq, trace));
  accumulate(dx, k_proj.backward(c.k_in, dk, trace));
  accumulate(dx, v_proj.backward(c.v_in, dv, trace));
  return dx;
}

}  // namespace bwta
