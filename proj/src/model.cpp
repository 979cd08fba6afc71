#include "essa/model.hpp"

#include <algorithm>
#include <cmath>

#include "essa/binary_io.hpp"
#include "essa/error.hpp"
#include "essa/rng.hpp"

namespace essa {
namespace {

constexpr double kLayerNormEps = 1e-5;

std::uint64_t name_stream(std::string_view name) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : name) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

Matrix gaussian(std::uint64_t seed, std::string_view name, Eigen::Index rows, Eigen::Index cols, double std) {
  CounterRng rng(seed, name_stream(name));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
  }
  return m;
}

std::string layer_name(int l, std::string_view part) { return "layer" + std::to_string(l) + "." + std::string(part); }
std::string fc_name(int l) { return "mlp" + std::to_string(l) + ".fc"; }

void layer_norm(const Vector& x, Vector& out) {
  const double mu = x.mean();
  out = x.array() - mu;
  const double var = out.squaredNorm() / static_cast<double>(x.size());
  out *= 1.0 / std::sqrt(var + kLayerNormEps);
}

void layer_norm_rows(const Matrix& x, Matrix& out, Vector& rstd) {
  out.resize(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double mu = x.row(t).mean();
    out.row(t) = x.row(t).array() - mu;
    const double var = out.row(t).squaredNorm() / static_cast<double>(x.cols());
    rstd(t) = 1.0 / std::sqrt(var + kLayerNormEps);
    out.row(t) *= rstd(t);
  }
}

Matrix layer_norm_rows_backward(const Matrix& dn, const Matrix& n, const Vector& rstd) {
  Matrix dx(dn.rows(), dn.cols());
  const double inv = 1.0 / static_cast<double>(dn.cols());
  for (Eigen::Index t = 0; t < dn.rows(); ++t) {
    const double mean_dn = dn.row(t).sum() * inv;
    const double mean_dn_n = dn.row(t).dot(n.row(t)) * inv;
    dx.row(t) = rstd(t) * (dn.row(t).array() - mean_dn - n.row(t).array() * mean_dn_n).matrix();
  }
  return dx;
}

int argmax(const Vector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<int>(best);
}

// Answer tokens plus EOS; the training target sequence.
std::vector<int> target_tokens(const TaskExample& ex) {
  auto t = Tokenizer::encode(normalize_answer(ex.answer));
  t.push_back(Tokenizer::kEos);
  return t;
}

void check_overrides(const PolicyModel& model, std::span<const FactorPair> overrides) {
  if (overrides.empty()) return;
  const auto targets = model.adapter_targets();
  if (overrides.size() != targets.size()) {
    throw Error(ErrorCode::kAdapterMismatch, "expected " + std::to_string(targets.size()) +
                                                 " adapter overrides, got " + std::to_string(overrides.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Matrix& w = model.weight(targets[i]);
    const auto& o = overrides[i];
    if (o.b.rows() != w.rows() || o.a.cols() != w.cols() || o.b.cols() != o.a.rows()) {
      throw Error(ErrorCode::kAdapterMismatch, "override for " + targets[i] + " has incompatible shape");
    }
  }
}

// Effective weights keyed by target name; non-adapted weights are referenced.
struct EffectiveWeights {
  std::vector<Matrix> owned;
  std::map<std::string, const Matrix*, std::less<>> lookup;

  EffectiveWeights(const PolicyModel& model, std::span<const FactorPair> overrides) {
    check_overrides(model, overrides);
    for (const auto& [name, w] : model.base()) lookup[name] = &w;
    const auto targets = model.adapter_targets();
    owned.reserve(overrides.size());
    for (std::size_t i = 0; i < overrides.size(); ++i) {
      owned.push_back(model.weight(targets[i]) + delta_weight(overrides[i].b, overrides[i].a));
    }
    for (std::size_t i = 0; i < overrides.size(); ++i) lookup[targets[i]] = &owned[i];
  }

  const Matrix& operator[](std::string_view name) const { return *lookup.find(name)->second; }
};

// ---- transformer training pass ----

struct LayerTrace {
  Matrix x_in, hn, q, k, v, att, x_mid, h2n, u, g;
  Vector rstd1, rstd2;
  std::vector<Matrix> probs;
};

struct TransformerGrads {
  std::map<std::string, Matrix, std::less<>> dw;  // only adapter targets
};

double transformer_example(const PolicyModel& model, const EffectiveWeights& w, const TaskExample& ex,
                           double weight, TransformerGrads* grads) {
  const auto& arch = model.arch();
  const int d = arch.model_dim;
  const int heads = arch.heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<int> seq(ex.prompt.begin(), ex.prompt.end());
  const auto targets = target_tokens(ex);
  seq.insert(seq.end(), targets.begin(), targets.end());
  const auto T = static_cast<Eigen::Index>(seq.size() - 1);
  if (T + 1 > arch.max_seq) {
    throw Error(ErrorCode::kInvalidConfig, "example '" + ex.prompt_text + "' exceeds max_seq");
  }
  const auto first_target = static_cast<Eigen::Index>(ex.prompt.size()) - 1;

  const Matrix& emb = w["tok_emb"];
  const Matrix& pos = w["pos_emb"];
  Matrix x(T, d);
  for (Eigen::Index t = 0; t < T; ++t) x.row(t) = emb.row(seq[static_cast<std::size_t>(t)]) + pos.row(t);

  std::vector<LayerTrace> trace(static_cast<std::size_t>(arch.layers));
  for (int l = 0; l < arch.layers; ++l) {
    auto& tr = trace[static_cast<std::size_t>(l)];
    tr.x_in = x;
    layer_norm_rows(x, tr.hn, tr.rstd1);
    tr.q = tr.hn * w[layer_name(l, "Q")].transpose();
    tr.k = tr.hn * w[layer_name(l, "K")].transpose();
    tr.v = tr.hn * w[layer_name(l, "V")].transpose();
    tr.att = Matrix::Zero(T, d);
    tr.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Matrix s = tr.q.middleCols(h * dh, dh) * tr.k.middleCols(h * dh, dh).transpose() * scale;
      Matrix p = Matrix::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const double peak = s.row(i).head(i + 1).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          p(i, j) = std::exp(s(i, j) - peak);
          total += p(i, j);
        }
        p.row(i).head(i + 1) /= total;
      }
      tr.att.middleCols(h * dh, dh) = p * tr.v.middleCols(h * dh, dh);
      tr.probs[static_cast<std::size_t>(h)] = std::move(p);
    }
    x += tr.att * w[layer_name(l, "O")].transpose();
    tr.x_mid = x;
    layer_norm_rows(x, tr.h2n, tr.rstd2);
    tr.u = tr.h2n * w[layer_name(l, "mlp_in")].transpose();
    tr.g = tr.u.cwiseMax(0.0);
    x += tr.g * w[layer_name(l, "mlp_out")].transpose();
  }
  Matrix hfn;
  Vector rstdf;
  layer_norm_rows(x, hfn, rstdf);
  const Matrix logits = hfn * emb.transpose();

  const auto count = static_cast<double>(T - first_target);
  double loss = 0.0;
  Matrix dlogits = Matrix::Zero(T, logits.cols());
  for (Eigen::Index t = first_target; t < T; ++t) {
    const int target = seq[static_cast<std::size_t>(t + 1)];
    const double peak = logits.row(t).maxCoeff();
    Eigen::RowVectorXd p = (logits.row(t).array() - peak).exp();
    const double total = p.sum();
    loss += -(logits(t, target) - peak - std::log(total));
    p /= total;
    p(target) -= 1.0;
    dlogits.row(t) = p * (weight / count);
  }
  loss /= count;
  if (grads == nullptr) return loss;

  Matrix dx = layer_norm_rows_backward(dlogits * emb, hfn, rstdf);
  for (int l = arch.layers - 1; l >= 0; --l) {
    const auto& tr = trace[static_cast<std::size_t>(l)];
    // MLP block
    Matrix dg = dx * w[layer_name(l, "mlp_out")];
    Matrix du = dg.cwiseProduct((tr.u.array() > 0.0).cast<double>().matrix());
    Matrix dx_mid = dx + layer_norm_rows_backward(du * w[layer_name(l, "mlp_in")], tr.h2n, tr.rstd2);
    // Attention block
    const std::string o_name = layer_name(l, "O");
    grads->dw[o_name].noalias() += dx_mid.transpose() * tr.att;
    Matrix datt = dx_mid * w[o_name];
    Matrix dq = Matrix::Zero(T, d), dk = Matrix::Zero(T, d), dv = Matrix::Zero(T, d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& p = tr.probs[static_cast<std::size_t>(h)];
      const auto datt_h = datt.middleCols(h * dh, dh);
      Matrix dp = datt_h * tr.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * datt_h;
      Matrix ds = Matrix::Zero(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const double inner = p.row(i).head(i + 1).dot(dp.row(i).head(i + 1));
        for (Eigen::Index j = 0; j <= i; ++j) ds(i, j) = p(i, j) * (dp(i, j) - inner);
      }
      dq.middleCols(h * dh, dh) = ds * tr.k.middleCols(h * dh, dh) * scale;
      dk.middleCols(h * dh, dh) = ds.transpose() * tr.q.middleCols(h * dh, dh) * scale;
    }
    const std::string q_name = layer_name(l, "Q");
    const std::string k_name = layer_name(l, "K");
    const std::string v_name = layer_name(l, "V");
    grads->dw[q_name].noalias() += dq.transpose() * tr.hn;
    grads->dw[k_name].noalias() += dk.transpose() * tr.hn;
    grads->dw[v_name].noalias() += dv.transpose() * tr.hn;
    Matrix dhn = dq * w[q_name] + dk * w[k_name] + dv * w[v_name];
    dx = dx_mid + layer_norm_rows_backward(dhn, tr.hn, tr.rstd1);
  }
  return loss;
}

// ---- MLP training pass ----

Vector mlp_input(const PolicyModel& model, const Matrix& emb, std::span<const int> seq, Eigen::Index t) {
  const int window = model.arch().max_seq;
  const int d = model.arch().model_dim;
  Vector x0 = Vector::Zero(static_cast<Eigen::Index>(window) * d);
  for (int s = 0; s < window; ++s) {
    const Eigen::Index src = t - (window - 1) + s;
    if (src < 0) continue;
    x0.segment(static_cast<Eigen::Index>(s) * d, d) = emb.row(seq[static_cast<std::size_t>(src)]).transpose();
  }
  return x0;
}

double mlp_example(const PolicyModel& model, const EffectiveWeights& w, const TaskExample& ex, double weight,
                   TransformerGrads* grads) {
  const auto& arch = model.arch();
  std::vector<int> seq(ex.prompt.begin(), ex.prompt.end());
  const auto targets = target_tokens(ex);
  seq.insert(seq.end(), targets.begin(), targets.end());
  const auto T = static_cast<Eigen::Index>(seq.size() - 1);
  const auto first_target = static_cast<Eigen::Index>(ex.prompt.size()) - 1;
  const auto count = static_cast<double>(T - first_target);
  const Matrix& emb = w["tok_emb"];
  const Matrix& unembed = w["unembed"];

  double loss = 0.0;
  for (Eigen::Index t = first_target; t < T; ++t) {
    std::vector<Vector> acts;  // acts[0] = input, acts[l+1] = relu output of layer l
    std::vector<Vector> pre;
    acts.push_back(mlp_input(model, emb, seq, t));
    for (int l = 0; l < arch.layers; ++l) {
      pre.push_back(w[fc_name(l)] * acts.back());
      acts.push_back(pre.back().cwiseMax(0.0));
    }
    const Vector logits = unembed * acts.back();
    const int target = seq[static_cast<std::size_t>(t + 1)];
    const double peak = logits.maxCoeff();
    Vector p = (logits.array() - peak).exp();
    const double total = p.sum();
    loss += -(logits(target) - peak - std::log(total));
    if (grads == nullptr) continue;
    p /= total;
    p(target) -= 1.0;
    Vector dact = unembed.transpose() * (p * (weight / count));
    for (int l = arch.layers - 1; l >= 0; --l) {
      const Vector dpre = dact.cwiseProduct((pre[static_cast<std::size_t>(l)].array() > 0.0).cast<double>().matrix());
      grads->dw[fc_name(l)].noalias() += dpre * acts[static_cast<std::size_t>(l)].transpose();
      dact = w[fc_name(l)].transpose() * dpre;
    }
  }
  return loss / count;
}

}  // namespace

std::string_view to_string(Precision p) {
  switch (p) {
    case Precision::kF32: return "f32";
    case Precision::kSimInt8: return "int8";
    case Precision::kSimInt4: return "int4";
  }
  return "unknown";
}

std::string_view to_string(ArchKind k) { return k == ArchKind::kTransformer ? "transformer" : "mlp"; }

int quant_levels(Precision p) {
  switch (p) {
    case Precision::kSimInt8: return 127;
    case Precision::kSimInt4: return 7;
    case Precision::kF32: break;
  }
  throw Error(ErrorCode::kInvalidConfig, "f32 has no integer grid");
}

void validate(const Architecture& a) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  if (a.vocab < Tokenizer::kVocabSize) fail("vocab smaller than the tokenizer");
  if (a.model_dim < 1 || a.layers < 1 || a.mlp_hidden < 1 || a.max_seq < 1) fail("architecture sizes must be positive");
  if (a.kind == ArchKind::kTransformer && (a.heads < 1 || a.model_dim % a.heads != 0)) {
    fail("model_dim must be divisible by heads");
  }
}

PolicyModel PolicyModel::create(const Architecture& arch, std::uint64_t seed) {
  validate(arch);
  PolicyModel m;
  m.arch_ = arch;
  const int d = arch.model_dim;
  const int h = arch.mlp_hidden;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  // Tied unembedding: logits have standard deviation sqrt(8) at any width.
  const double emb_std = std::sqrt(8.0 / static_cast<double>(d));
  if (arch.kind == ArchKind::kTransformer) {
    m.base_["tok_emb"] = gaussian(seed, "tok_emb", arch.vocab, d, emb_std);
    m.base_["pos_emb"] = gaussian(seed, "pos_emb", arch.max_seq, d, 1.0);
    for (int l = 0; l < arch.layers; ++l) {
      for (const char* part : {"Q", "K", "V", "O"}) {
        const auto name = layer_name(l, part);
        m.base_[name] = gaussian(seed, name, d, d, inv_sqrt_d);
      }
      const auto in = layer_name(l, "mlp_in");
      const auto out = layer_name(l, "mlp_out");
      m.base_[in] = gaussian(seed, in, h, d, std::sqrt(2.0) * inv_sqrt_d);
      m.base_[out] = gaussian(seed, out, d, h, 0.5 / std::sqrt(static_cast<double>(h)));
    }
  } else {
    m.base_["tok_emb"] = gaussian(seed, "tok_emb", arch.vocab, d, emb_std);
    Eigen::Index fan_in = static_cast<Eigen::Index>(arch.max_seq) * d;
    for (int l = 0; l < arch.layers; ++l) {
      const auto name = fc_name(l);
      m.base_[name] = gaussian(seed, name, h, fan_in, std::sqrt(2.0 / static_cast<double>(fan_in)));
      fan_in = h;
    }
    m.base_["unembed"] = gaussian(seed, "unembed", arch.vocab, h, 1.0 / std::sqrt(static_cast<double>(h)));
  }
  return m;
}

const Matrix& PolicyModel::weight(std::string_view name) const {
  const auto it = base_.find(name);
  if (it == base_.end()) throw Error(ErrorCode::kAdapterMismatch, "no projection named " + std::string(name));
  return it->second;
}

std::vector<std::string> PolicyModel::adapter_targets() const {
  std::vector<std::string> out;
  for (int l = 0; l < arch_.layers; ++l) {
    if (arch_.kind == ArchKind::kTransformer) {
      for (const char* part : {"Q", "K", "V", "O"}) out.push_back(layer_name(l, part));
    } else {
      out.push_back(fc_name(l));
    }
  }
  return out;
}

void PolicyModel::set_adapters(std::vector<LowRankAdapter> adapters) {
  const auto targets = adapter_targets();
  if (adapters.size() != targets.size()) {
    throw Error(ErrorCode::kAdapterMismatch, "expected " + std::to_string(targets.size()) + " adapters, got " +
                                                 std::to_string(adapters.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const Matrix& w = weight(targets[i]);
    const auto& a = adapters[i];
    if (a.name != targets[i] || a.b.rows() != w.rows() || a.a.cols() != w.cols() || a.b.cols() != a.a.rows()) {
      throw Error(ErrorCode::kAdapterMismatch, "adapter " + a.name + " does not fit projection " + targets[i]);
    }
  }
  adapters_ = std::move(adapters);
}

std::vector<LowRankAdapter> init_adapters(const PolicyModel& model, int rank, double init_std, std::uint64_t seed) {
  std::vector<LowRankAdapter> out;
  for (const auto& name : model.adapter_targets()) {
    const Matrix& w = model.weight(name);
    if (rank < 1 || rank > std::min(w.rows(), w.cols())) {
      throw Error(ErrorCode::kInvalidConfig, "rank " + std::to_string(rank) + " does not fit " + name);
    }
    LowRankAdapter a;
    a.name = name;
    a.a = gaussian(seed, "adapter." + name, rank, w.cols(), init_std);
    a.b = Matrix::Zero(w.rows(), rank);
    out.push_back(std::move(a));
  }
  return out;
}

PolicyModel quantize_base(const PolicyModel& model, Precision mode, kernels::Exec exec) {
  if (model.precision_ != Precision::kF32) {
    throw Error(ErrorCode::kAlreadyQuantized, "model is already " + std::string(to_string(model.precision_)));
  }
  const int qmax = quant_levels(mode);
  PolicyModel out = model;
  out.precision_ = mode;
  for (auto& [name, w] : out.base_) {
    if (name == "tok_emb" || name == "pos_emb" || name == "unembed") continue;
    kernels::quantize_rows(w, qmax, exec);
  }
  return out;
}

InferenceSession::InferenceSession(const PolicyModel& model, std::span<const FactorPair> overrides)
    : model_(&model) {
  check_overrides(model, overrides);
  const auto targets = model.adapter_targets();
  owned_.reserve(overrides.size());
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    owned_.push_back(model.weight(targets[i]) + delta_weight(overrides[i].b, overrides[i].a));
  }
  auto resolve = [&](const std::string& name) -> const Matrix* {
    for (std::size_t i = 0; i < owned_.size(); ++i) {
      if (targets[i] == name) return &owned_[i];
    }
    return &model.weight(name);
  };
  const auto& arch = model.arch();
  for (int l = 0; l < arch.layers; ++l) {
    if (arch.kind == ArchKind::kTransformer) {
      layers_.push_back({resolve(layer_name(l, "Q")), resolve(layer_name(l, "K")), resolve(layer_name(l, "V")),
                         resolve(layer_name(l, "O")), resolve(layer_name(l, "mlp_in")),
                         resolve(layer_name(l, "mlp_out"))});
    } else {
      mlp_fc_.push_back(resolve(fc_name(l)));
    }
  }
}

std::vector<int> InferenceSession::generate(std::span<const int> prompt, std::size_t max_new) const {
  if (model_->arch().kind == ArchKind::kTransformer) return generate_transformer(prompt, max_new, nullptr);
  return generate_mlp(prompt, max_new, nullptr);
}

Vector InferenceSession::next_logits(std::span<const int> prefix) const {
  Vector logits;
  if (model_->arch().kind == ArchKind::kTransformer) {
    generate_transformer(prefix, 0, &logits);
  } else {
    generate_mlp(prefix, 0, &logits);
  }
  return logits;
}

std::vector<int> InferenceSession::generate_transformer(std::span<const int> prompt, std::size_t max_new,
                                                        Vector* last_logits) const {
  const auto& arch = model_->arch();
  if (prompt.empty() || static_cast<int>(prompt.size()) > arch.max_seq) {
    throw Error(ErrorCode::kInvalidConfig, "prompt length must be in [1, max_seq]");
  }
  const int d = arch.model_dim;
  const int heads = arch.heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& emb = model_->weight("tok_emb");
  const Matrix& pos_emb = model_->weight("pos_emb");

  std::vector<Matrix> keys(layers_.size(), Matrix(arch.max_seq, d));
  std::vector<Matrix> values(layers_.size(), Matrix(arch.max_seq, d));
  Vector x(d), h(d), q(d), att(d), scores(arch.max_seq);

  auto step = [&](int token, int pos) {
    x = emb.row(token).transpose() + pos_emb.row(pos).transpose();
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& w = layers_[l];
      layer_norm(x, h);
      q.noalias() = *w.q * h;
      keys[l].row(pos).noalias() = (*w.k * h).transpose();
      values[l].row(pos).noalias() = (*w.v * h).transpose();
      for (int hd = 0; hd < heads; ++hd) {
        const auto qh = q.segment(hd * dh, dh);
        double peak = -INFINITY;
        for (int j = 0; j <= pos; ++j) {
          scores(j) = keys[l].row(j).segment(hd * dh, dh).dot(qh.transpose()) * scale;
          peak = std::max(peak, scores(j));
        }
        double total = 0.0;
        for (int j = 0; j <= pos; ++j) {
          scores(j) = std::exp(scores(j) - peak);
          total += scores(j);
        }
        auto out = att.segment(hd * dh, dh);
        out.setZero();
        for (int j = 0; j <= pos; ++j) out += (scores(j) / total) * values[l].row(j).segment(hd * dh, dh).transpose();
      }
      x.noalias() += *w.o * att;
      layer_norm(x, h);
      const Vector u = (*w.w1 * h).cwiseMax(0.0);
      x.noalias() += *w.w2 * u;
    }
    layer_norm(x, h);
    return Vector(emb * h);
  };

  Vector logits;
  int pos = 0;
  for (int token : prompt) logits = step(token, pos++);
  if (last_logits != nullptr) *last_logits = logits;

  std::vector<int> out;
  while (out.size() < max_new) {
    const int next = argmax(logits);
    if (next == Tokenizer::kEos) break;
    out.push_back(next);
    if (pos >= arch.max_seq || out.size() == max_new) break;
    logits = step(next, pos++);
  }
  return out;
}

std::vector<int> InferenceSession::generate_mlp(std::span<const int> prompt, std::size_t max_new,
                                                Vector* last_logits) const {
  if (prompt.empty()) throw Error(ErrorCode::kInvalidConfig, "empty prompt");
  const Matrix& emb = model_->weight("tok_emb");
  const Matrix& unembed = model_->weight("unembed");
  std::vector<int> seq(prompt.begin(), prompt.end());
  auto logits_at_end = [&]() {
    Vector act = mlp_input(*model_, emb, seq, static_cast<Eigen::Index>(seq.size()) - 1);
    for (const Matrix* w : mlp_fc_) act = (*w * act).cwiseMax(0.0);
    return Vector(unembed * act);
  };
  Vector logits = logits_at_end();
  if (last_logits != nullptr) *last_logits = logits;
  std::vector<int> out;
  while (out.size() < max_new) {
    const int next = argmax(logits);
    if (next == Tokenizer::kEos) break;
    out.push_back(next);
    seq.push_back(next);
    if (out.size() == max_new) break;
    logits = logits_at_end();
  }
  return out;
}

std::string InferenceSession::answer(const TaskExample& example, std::size_t max_new) const {
  return Tokenizer::decode(generate(example.prompt, max_new));
}

std::string forward(const PolicyModel& model, std::span<const FactorPair> overrides, std::span<const int> prompt,
                    std::size_t max_new) {
  const InferenceSession session(model, overrides);
  return Tokenizer::decode(session.generate(prompt, max_new));
}

bool is_correct(const InferenceSession& session, const TaskExample& example, std::size_t max_new) {
  return normalize_answer(session.answer(example, max_new)) == normalize_answer(example.answer);
}

std::size_t count_correct(const InferenceSession& session, std::span<const TaskExample> examples,
                          std::span<const std::size_t> indices, kernels::Exec exec) {
  const auto max_new = max_answer_tokens(examples) + 1;
  const auto n = static_cast<std::ptrdiff_t>(indices.size());
  std::size_t correct = 0;
  if (exec == kernels::Exec::kSerial) {
    for (auto i : indices) correct += is_correct(session, examples[i], max_new) ? 1 : 0;
    return correct;
  }
#pragma omp parallel for schedule(dynamic, 8) reduction(+ : correct)
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    correct += is_correct(session, examples[indices[static_cast<std::size_t>(k)]], max_new) ? 1 : 0;
  }
  return correct;
}

double accuracy(const PolicyModel& model, std::span<const FactorPair> overrides,
                std::span<const TaskExample> examples, kernels::Exec exec) {
  if (examples.empty()) throw Error(ErrorCode::kInvalidConfig, "accuracy over an empty set");
  const InferenceSession session(model, overrides);
  std::vector<std::size_t> all(examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return static_cast<double>(count_correct(session, examples, all, exec)) / static_cast<double>(examples.size());
}

LossAndGradients loss_and_gradients(const PolicyModel& model, std::span<const FactorPair> adapters,
                                    std::span<const TaskExample> batch, bool want_gradients) {
  if (batch.empty()) throw Error(ErrorCode::kInvalidConfig, "empty batch");
  const EffectiveWeights w(model, adapters);
  TransformerGrads grads;
  const auto targets = model.adapter_targets();
  if (want_gradients) {
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const Matrix& base = model.weight(targets[i]);
      grads.dw[targets[i]] = Matrix::Zero(base.rows(), base.cols());
    }
  }
  const double weight = 1.0 / static_cast<double>(batch.size());
  const bool transformer = model.arch().kind == ArchKind::kTransformer;
  LossAndGradients out;
  for (const auto& ex : batch) {
    auto* g = want_gradients ? &grads : nullptr;
    const double l = transformer ? transformer_example(model, w, ex, weight, g) : mlp_example(model, w, ex, weight, g);
    out.loss += l * weight;
  }
  if (want_gradients) {
    for (std::size_t i = 0; i < adapters.size(); ++i) {
      const Matrix& dw = grads.dw[targets[i]];
      out.grads.push_back({dw * adapters[i].a.transpose(), adapters[i].b.transpose() * dw});
    }
  }
  return out;
}

double sft_loss(const PolicyModel& model, std::span<const FactorPair> adapters,
                std::span<const TaskExample> examples) {
  return loss_and_gradients(model, adapters, examples, false).loss;
}

SftReport sft_train(const PolicyModel& model, std::span<const TaskExample> data, const SftOptions& options) {
  if (data.empty()) throw Error(ErrorCode::kInvalidConfig, "SFT data is empty");
  if (model.adapters().empty()) throw Error(ErrorCode::kInvalidConfig, "model has no adapters to train");
  if (options.batch_size == 0) throw Error(ErrorCode::kInvalidConfig, "batch size must be positive");

  auto pairs = stored_factors(model.adapters());
  SftReport report;
  report.initial_loss = sft_loss(model, pairs, data);

  std::vector<TaskExample> batch(options.batch_size);
  for (std::size_t step = 0; step < options.steps; ++step) {
    CounterRng rng(options.seed, step);
    for (auto& ex : batch) ex = data[rng.bounded(data.size())];
    const auto lg = loss_and_gradients(model, pairs, batch);
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorCode::kTrainingDiverged, "loss is " + std::to_string(lg.loss) + " at step " + std::to_string(step));
    }
    double lr = options.learning_rate;
    if (options.linear_decay) lr *= 1.0 - static_cast<double>(step) / static_cast<double>(options.steps);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      pairs[i].b -= lr * lg.grads[i].b;
      pairs[i].a -= lr * lg.grads[i].a;
    }
  }
  report.final_loss = sft_loss(model, pairs, data);
  if (!std::isfinite(report.final_loss)) throw Error(ErrorCode::kTrainingDiverged, "final loss is not finite");

  report.adapters = model.adapters();
  report.min_singular_value = INFINITY;
  report.max_singular_value = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    report.adapters[i].b = pairs[i].b;
    report.adapters[i].a = pairs[i].a;
    report.adapters[i].svd_a.reset();
    report.adapters[i].svd_b.reset();
    for (const Matrix* f : {&pairs[i].a, &pairs[i].b}) {
      const auto s = svd(*f).sigma;
      report.min_singular_value = std::min(report.min_singular_value, s.minCoeff());
      report.max_singular_value = std::max(report.max_singular_value, s.maxCoeff());
    }
  }
  report.degenerate = report.min_singular_value <= 1e-6;
  return report;
}

std::vector<std::uint8_t> encode_model(const PolicyModel& model) {
  ByteWriter w;
  w.magic("ESSM");
  w.u32(kModelFormatVersion);
  const auto& a = model.arch_;
  w.u32(static_cast<std::uint32_t>(a.kind));
  for (int v : {a.vocab, a.model_dim, a.heads, a.layers, a.mlp_hidden, a.max_seq}) w.u32(static_cast<std::uint32_t>(v));
  w.u32(static_cast<std::uint32_t>(model.precision_));
  w.u32(static_cast<std::uint32_t>(model.base_.size()));
  for (const auto& [name, m] : model.base_) {
    w.short_string(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f64(m.data()[i]);
  }
  return w.take();
}

PolicyModel decode_model(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::kCorruptCheckpoint);
  r.expect_magic("ESSM");
  const auto version = r.u32();
  if (version != kModelFormatVersion) r.fail("unsupported model format version " + std::to_string(version));
  Architecture a;
  const auto kind = r.u32();
  if (kind > 1) r.fail("unknown architecture kind");
  a.kind = static_cast<ArchKind>(kind);
  for (int* v : {&a.vocab, &a.model_dim, &a.heads, &a.layers, &a.mlp_hidden, &a.max_seq}) *v = static_cast<int>(r.u32());
  const auto precision = r.u32();
  if (precision > 2) r.fail("unknown precision");
  validate(a);

  PolicyModel expected = PolicyModel::create(a, 0);
  PolicyModel m;
  m.arch_ = a;
  m.precision_ = static_cast<Precision>(precision);
  const auto count = r.u32();
  if (count != expected.base_.size()) r.fail("unexpected number of weight matrices");
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.short_string();
    const auto rows = r.u32();
    const auto cols = r.u32();
    const auto it = expected.base_.find(name);
    if (it == expected.base_.end() || it->second.rows() != rows || it->second.cols() != cols) {
      r.fail("unexpected weight " + name);
    }
    Matrix w(rows, cols);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = r.f64();
    m.base_[std::move(name)] = std::move(w);
  }
  if (!r.done()) r.fail("trailing bytes after model");
  return m;
}

void save_model(const std::filesystem::path& path, const PolicyModel& model) {
  write_file_atomic(path, encode_model(model));
}

PolicyModel load_model(const std::filesystem::path& path) { return decode_model(read_file(path)); }

}  // namespace essa
