// SPDX-License-Identifier: Apache-2.0
#include "bwta/model.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "bwta/bwta_file.hpp"

namespace bwta {

void ModelConfig::validate() const {
  if (seq_len == 0 || d_in == 0) throw std::invalid_argument("ModelConfig: seq_len and d_in must be >= 1");
  if (classes < 2) throw std::invalid_argument("ModelConfig: need at least 2 classes");
  block.validate();
}

ToyClassifier::ToyClassifier(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  embed = DenseLinear(cfg.d_in, cfg.block.d_model, seed * 7919 + 1);
  block = TransformerBlock(cfg.block, seed * 7919 + 2);
  head = DenseLinear(cfg.block.d_model, cfg.classes, seed * 7919 + 3);
}

void ToyClassifier::check_input(std::size_t rows, std::size_t cols) const {
  if (rows != cfg_.seq_len || cols != cfg_.d_in)
    throw std::invalid_argument("ToyClassifier: input " + shape_string(rows, cols) + ", expected " +
                                shape_string(cfg_.seq_len, cfg_.d_in));
}

namespace {

template <typename T>
Matrix<T> mean_rows(const Matrix<T>& y) {
  Matrix<T> out(1, y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t c = 0; c < y.cols(); ++c) out(0, c) += y(r, c);
  for (std::size_t c = 0; c < y.cols(); ++c) out(0, c) /= static_cast<T>(y.rows());
  return out;
}

}  // namespace

DoubleMatrix ToyClassifier::forward_train(const DoubleMatrix& x, QuantTrace& trace, Cache* cache) const {
  check_input(x.rows(), x.cols());
  DoubleMatrix e = embed.forward(x);
  const DoubleMatrix y = block.forward_train(e, trace, cache ? &cache->block : nullptr);
  DoubleMatrix pooled = mean_rows(y);
  DoubleMatrix out = head.forward(pooled);
  if (cache) {
    cache->x = x;
    cache->embedded = std::move(e);
    cache->pooled = std::move(pooled);
  }
  return out;
}

void ToyClassifier::backward(const Cache& cache, const DoubleMatrix& dlogits, const QuantTrace& trace) {
  const DoubleMatrix dpooled = head.backward(cache.pooled, dlogits);
  const std::size_t t = cache.embedded.rows();
  DoubleMatrix dy(t, dpooled.cols());
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < dy.cols(); ++c) dy(r, c) = dpooled(0, c) / double(t);
  const DoubleMatrix de = block.backward(cache.block, dy, trace);
  embed.backward(cache.x, de);
}

DenseMatrix ToyClassifier::logits(const DenseMatrix& x, const KernelConfig& kcfg) const {
  check_input(x.rows(), x.cols());
  const DenseMatrix e = embed.forward(x);
  DenseMatrix y;
  if (block.quantized && block.levels() == 1) {
    y = block.forward(e, kcfg);
  } else {
    QuantTrace trace;
    trace.quantize = block.quantized;
    y = to_float(block.forward_train(to_double(e), trace, nullptr));
  }
  return head.forward(mean_rows(y));
}

std::size_t ToyClassifier::predict(const DenseMatrix& x, const KernelConfig& kcfg) const {
  const DenseMatrix z = logits(x, kcfg);
  std::size_t best = 0;
  for (std::size_t c = 1; c < z.cols(); ++c)
    if (z(0, c) > z(0, best)) best = c;
  return best;
}

void ToyClassifier::visit_params(const ParamVisitor& visit) {
  for (auto [name, l] : {std::pair{"embed", &embed}, std::pair{"head", &head}}) {
    visit(std::string(name) + ".weight", ParamKind::FullPrecision, l->weight.value.values(), l->weight.grad.values());
    visit(std::string(name) + ".bias", ParamKind::FullPrecision, l->bias.value.values(), l->bias.grad.values());
  }
  block.visit_params("block.", visit);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kManifest = "manifest.txt";

std::string float_text(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

void write_text_matrix(const std::filesystem::path& path, const DenseMatrix& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? " " : "") << float_text(m(r, c));
    out << '\n';
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

DenseMatrix read_text_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::size_t rows = 0, cols = 0;
  if (!(in >> rows >> cols)) throw std::runtime_error(path.string() + ": missing shape header");
  DenseMatrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::string tok;
    if (!(in >> tok)) throw std::runtime_error(path.string() + ": expected " + std::to_string(m.size()) + " values");
    m[i] = std::stof(tok);
  }
  return m;
}

const std::pair<const char*, BwtaLinear TransformerBlock::*> kLinears[] = {
    {"q_proj", &TransformerBlock::q_proj}, {"k_proj", &TransformerBlock::k_proj},
    {"v_proj", &TransformerBlock::v_proj}, {"o_proj", &TransformerBlock::o_proj},
    {"ffn1", &TransformerBlock::ffn1},     {"ffn2", &TransformerBlock::ffn2}};

}  // namespace

void save_checkpoint(const ToyClassifier& model, const std::filesystem::path& dir) {
  const TransformerBlock& b = model.block;
  if (!b.quantized || b.levels() != 1)
    throw std::logic_error("save_checkpoint: the block must be quantized at L = 1");
  std::filesystem::create_directories(dir);

  for (auto [name, member] : kLinears) {
    const BwtaLinear& l = b.*member;
    write_bwta(dir / (std::string(name) + ".bwta"), BwtaFile{l.weight_scale(), l.packed_weight()});
  }
  write_text_matrix(dir / "embed.weight.txt", model.embed.weight.value);
  write_text_matrix(dir / "embed.bias.txt", model.embed.bias.value);
  write_text_matrix(dir / "head.weight.txt", model.head.weight.value);
  write_text_matrix(dir / "head.bias.txt", model.head.bias.value);
  write_text_matrix(dir / "ln1.gamma.txt", b.ln1.gamma.value);
  write_text_matrix(dir / "ln1.beta.txt", b.ln1.beta.value);
  write_text_matrix(dir / "ln2.gamma.txt", b.ln2.gamma.value);
  write_text_matrix(dir / "ln2.beta.txt", b.ln2.beta.value);

  const ModelConfig& cfg = model.config();
  std::ofstream out(dir / kManifest);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  out << "format=bwta-checkpoint\nversion=1\n";
  out << "seq_len=" << cfg.seq_len << "\nd_in=" << cfg.d_in << "\nclasses=" << cfg.classes << '\n';
  out << "d_model=" << cfg.block.d_model << "\nheads=" << cfg.block.heads << "\nd_ff=" << cfg.block.d_ff << '\n';
  out << "stage_L=" << b.levels() << '\n';
  out << "ln_eps=" << float_text(b.ln1.eps) << '\n';
  for (std::size_t s = 0; s < kSlotCount; ++s) out << "scale." << slot_name(s) << '=' << float_text(b.scale(s).state.scale) << '\n';
  if (!out) throw std::runtime_error("manifest write failed in " + dir.string());
}

ToyClassifier load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / kManifest);
  if (!in) throw std::runtime_error("no manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("manifest: missing key '" + key + "'");
    return it->second;
  };
  if (get("format") != "bwta-checkpoint" || get("version") != "1")
    throw std::runtime_error("manifest: unsupported format or version");
  if (get("stage_L") != "1") throw std::runtime_error("manifest: only L = 1 checkpoints are loadable");

  ModelConfig cfg;
  cfg.seq_len = std::stoul(get("seq_len"));
  cfg.d_in = std::stoul(get("d_in"));
  cfg.classes = std::stoul(get("classes"));
  cfg.block.d_model = std::stoul(get("d_model"));
  cfg.block.heads = std::stoul(get("heads"));
  cfg.block.d_ff = std::stoul(get("d_ff"));

  ToyClassifier model(cfg, 0);
  TransformerBlock& b = model.block;
  b.quantized = true;
  b.set_levels(1);
  for (std::size_t s = 0; s < kSlotCount; ++s) b.scale(s).state.scale = std::stof(get(std::string("scale.") + slot_name(s)));

  for (auto [name, member] : kLinears) {
    BwtaLinear& l = b.*member;
    BwtaFile f = read_bwta(dir / (std::string(name) + ".bwta"));
    auto* packed = std::get_if<PackedBinaryMatrix>(&f.matrix);
    if (!packed || packed->kind != BinaryKind::SignNegIsOne)
      throw std::runtime_error(std::string(name) + ".bwta: expected a sign-binary matrix");
    if (packed->rows != l.out_features() || packed->cols != l.in_features())
      throw std::runtime_error(std::string(name) + ".bwta: shape does not match the manifest");
    l = BwtaLinear(std::move(*packed), f.scale, l.act.state);
  }

  auto load = [&](Param& p, const char* file) {
    DenseMatrix m = read_text_matrix(dir / file);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw std::runtime_error(std::string(file) + ": shape " + shape_of(m) + ", expected " + shape_of(p.value));
    p = Param(std::move(m));
  };
  load(model.embed.weight, "embed.weight.txt");
  load(model.embed.bias, "embed.bias.txt");
  load(model.head.weight, "head.weight.txt");
  load(model.head.bias, "head.bias.txt");
  load(b.ln1.gamma, "ln1.gamma.txt");
  load(b.ln1.beta, "ln1.beta.txt");
  load(b.ln2.gamma, "ln2.gamma.txt");
  load(b.ln2.beta, "ln2.beta.txt");
  b.ln1.eps = b.ln2.eps = std::stof(get("ln_eps"));
  return model;
}

}  // namespace bwta
