#include "aevb/networks.hpp"

#include <algorithm>
#include <cmath>

#include "aevb/errors.hpp"

namespace aevb {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

// input * W^T + b, one row per example.
Matrix affine(const Matrix& input, const Matrix& w, const Vector& b) {
  Matrix out = matmul_bt(input, w);
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return out;
}

void add_column_sums(const Matrix& m, Vector& acc) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) acc[c] += row[c];
  }
}

void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.flat();
  auto s = src.flat();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void apply_tanh(Matrix& m) {
  for (double& v : m.flat()) v = std::tanh(v);
}

double clamp_log_var(double v) { return std::clamp(v, kLogVarMin, kLogVarMax); }

bool log_var_active(double raw) { return raw >= kLogVarMin && raw <= kLogVarMax; }

double row_weight(std::span<const double> weight, std::size_t r) {
  return weight.empty() ? 1.0 : weight[r];
}

void check_finite(const Matrix& m, const char* layer) {
  if (!m.all_finite()) throw NumericError(layer, "non-finite activation");
}

}  // namespace

// ---- parameter containers ----

BernoulliMlp BernoulliMlp::zeros(std::size_t in, std::size_t hidden, std::size_t out) {
  return {Matrix(hidden, in), Vector(hidden), Matrix(out, hidden), Vector(out)};
}

void BernoulliMlp::validate() const {
  require(w1.rows() == b1.size(), "BernoulliMlp: W1 rows must match b1");
  require(w2.rows() == b2.size(), "BernoulliMlp: W2 rows must match b2");
  require(w2.cols() == w1.rows(), "BernoulliMlp: W2 cols must match hidden size");
}

ParamBlocks BernoulliMlp::blocks() { return {w1.flat(), b1, w2.flat(), b2}; }
ConstParamBlocks BernoulliMlp::blocks() const { return {w1.flat(), b1, w2.flat(), b2}; }

GaussianMlp GaussianMlp::zeros(std::size_t in, std::size_t hidden, std::size_t out,
                               bool clamp_mean) {
  return {Matrix(hidden, in), Vector(hidden), Matrix(out, hidden), Vector(out),
          Matrix(out, hidden), Vector(out), clamp_mean};
}

void GaussianMlp::validate() const {
  require(w3.rows() == b3.size(), "GaussianMlp: W3 rows must match b3");
  require(w4.rows() == b4.size() && w5.rows() == b5.size(),
          "GaussianMlp: output weights must match output biases");
  require(w4.cols() == w3.rows() && w5.cols() == w3.rows(),
          "GaussianMlp: output weights must match hidden size");
  require(w4.rows() == w5.rows(), "GaussianMlp: mean and log-variance heads differ in size");
}

ParamBlocks GaussianMlp::blocks() {
  return {w3.flat(), b3, w4.flat(), b4, w5.flat(), b5};
}
ConstParamBlocks GaussianMlp::blocks() const {
  return {w3.flat(), b3, w4.flat(), b4, w5.flat(), b5};
}

LinearGaussian LinearGaussian::zeros(std::size_t latent, std::size_t data) {
  return {Matrix(data, latent), Vector(data), Vector(1)};
}

double LinearGaussian::noise_var() const { return std::exp(clamp_log_var(log_noise_var.at(0))); }

void LinearGaussian::validate() const {
  require(w.rows() == b.size(), "LinearGaussian: W rows must match b");
  require(log_noise_var.size() == 1, "LinearGaussian: expects a single log noise variance");
}

ParamBlocks LinearGaussian::blocks() { return {w.flat(), b, log_noise_var}; }
ConstParamBlocks LinearGaussian::blocks() const { return {w.flat(), b, log_noise_var}; }

std::string_view decoder_family_name(DecoderFamily f) noexcept {
  switch (f) {
    case DecoderFamily::Bernoulli: return "bernoulli";
    case DecoderFamily::Gaussian: return "gaussian";
    case DecoderFamily::LinearGaussian: return "linear_gaussian";
  }
  return "unknown";
}

DecoderFamily parse_decoder_family(std::string_view name) {
  if (name == "bernoulli") return DecoderFamily::Bernoulli;
  if (name == "gaussian") return DecoderFamily::Gaussian;
  if (name == "linear_gaussian" || name == "linear") return DecoderFamily::LinearGaussian;
  throw ContractError("unknown decoder family '" + std::string(name) + "'");
}

DecoderFamily decoder_family(const Decoder& d) noexcept {
  return static_cast<DecoderFamily>(d.index());
}

std::size_t decoder_input_dim(const Decoder& d) noexcept {
  return std::visit([](const auto& net) { return net.input_dim(); }, d);
}

std::size_t decoder_output_dim(const Decoder& d) noexcept {
  return std::visit([](const auto& net) { return net.output_dim(); }, d);
}

ParamBlocks decoder_blocks(Decoder& d) {
  return std::visit([](auto& net) { return net.blocks(); }, d);
}

ConstParamBlocks decoder_blocks(const Decoder& d) {
  return std::visit([](const auto& net) { return net.blocks(); }, d);
}

void VaeShape::validate() const {
  require(data_dim > 0 && encoder_hidden > 0 && latent_dim > 0,
          "VaeShape: data, encoder hidden and latent sizes must be positive");
  require(family == DecoderFamily::LinearGaussian || decoder_hidden > 0,
          "VaeShape: decoder hidden size must be positive");
}

VaeModel VaeModel::zeros(const VaeShape& s) {
  s.validate();
  VaeModel m{GaussianMlp::zeros(s.data_dim, s.encoder_hidden, s.latent_dim, false),
             BernoulliMlp{}};
  switch (s.family) {
    case DecoderFamily::Bernoulli:
      m.decoder = BernoulliMlp::zeros(s.latent_dim, s.decoder_hidden, s.data_dim);
      break;
    case DecoderFamily::Gaussian:
      m.decoder = GaussianMlp::zeros(s.latent_dim, s.decoder_hidden, s.data_dim, s.clamp_mean);
      break;
    case DecoderFamily::LinearGaussian:
      m.decoder = LinearGaussian::zeros(s.latent_dim, s.data_dim);
      break;
  }
  return m;
}

VaeShape VaeModel::shape() const {
  VaeShape s;
  s.data_dim = data_dim();
  s.encoder_hidden = encoder.hidden_dim();
  s.latent_dim = latent_dim();
  s.family = decoder_family(decoder);
  if (const auto* b = std::get_if<BernoulliMlp>(&decoder)) s.decoder_hidden = b->hidden_dim();
  if (const auto* g = std::get_if<GaussianMlp>(&decoder)) {
    s.decoder_hidden = g->hidden_dim();
    s.clamp_mean = g->clamp_mean_unit_interval;
  }
  return s;
}

void VaeModel::validate() const {
  encoder.validate();
  std::visit([](const auto& net) { net.validate(); }, decoder);
  require(decoder_input_dim(decoder) == latent_dim(),
          "VaeModel: decoder input size must equal the latent size");
  require(decoder_output_dim(decoder) == data_dim(),
          "VaeModel: decoder output size must equal the encoder input size");
}

ParamBlocks VaeModel::blocks() {
  ParamBlocks b = encoder.blocks();
  auto d = decoder_blocks(decoder);
  b.insert(b.end(), d.begin(), d.end());
  return b;
}

ConstParamBlocks VaeModel::blocks() const {
  ConstParamBlocks b = encoder.blocks();
  auto d = decoder_blocks(decoder);
  b.insert(b.end(), d.begin(), d.end());
  return b;
}

std::size_t total_size(const ConstParamBlocks& blocks) noexcept {
  std::size_t n = 0;
  for (auto b : blocks) n += b.size();
  return n;
}

Vector flatten(const ConstParamBlocks& blocks) {
  Vector out;
  out.reserve(total_size(blocks));
  for (auto b : blocks) out.insert(out.end(), b.begin(), b.end());
  return out;
}

void unflatten(std::span<const double> flat, const ParamBlocks& blocks) {
  require(flat.size() == total_size(as_const(blocks)), "unflatten: size mismatch");
  std::size_t off = 0;
  for (auto b : blocks) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), b.size(), b.begin());
    off += b.size();
  }
}

void scale_blocks(const ParamBlocks& blocks, double factor) {
  for (auto b : blocks)
    for (double& v : b) v *= factor;
}

void zero_blocks(const ParamBlocks& blocks) {
  for (auto b : blocks) std::fill(b.begin(), b.end(), 0.0);
}

void axpy_blocks(const ParamBlocks& dst, const ConstParamBlocks& src, double factor) {
  require(dst.size() == src.size(), "axpy_blocks: block count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    require(dst[i].size() == src[i].size(), "axpy_blocks: block size mismatch");
    for (std::size_t j = 0; j < dst[i].size(); ++j) dst[i][j] += factor * src[i][j];
  }
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// ---- forward passes ----

BernoulliActivations bernoulli_forward_batch(const BernoulliMlp& net, const Matrix& z) {
  net.validate();
  require(z.cols() == net.input_dim(), "bernoulli_forward: input has " +
                                           std::to_string(z.cols()) + " columns, expected " +
                                           std::to_string(net.input_dim()));
  BernoulliActivations act;
  act.hidden = affine(z, net.w1, net.b1);
  apply_tanh(act.hidden);
  act.probs = affine(act.hidden, net.w2, net.b2);
  for (double& v : act.probs.flat()) v = sigmoid(v);
  return act;
}

Vector bernoulli_forward(const BernoulliMlp& net, std::span<const double> z) {
  Matrix in(1, z.size(), Vector(z.begin(), z.end()));
  return bernoulli_forward_batch(net, in).probs.data();
}

double bernoulli_loglik(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "bernoulli_loglik: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double p = std::clamp(y[i], kProbClamp, 1.0 - kProbClamp);
    s += x[i] * std::log(p) + (1.0 - x[i]) * std::log1p(-p);
  }
  return s;
}

GaussianActivations gaussian_forward_batch(const GaussianMlp& net, const Matrix& input) {
  net.validate();
  require(input.cols() == net.input_dim(), "gaussian_forward: input has " +
                                               std::to_string(input.cols()) +
                                               " columns, expected " +
                                               std::to_string(net.input_dim()));
  GaussianActivations act;
  act.hidden = affine(input, net.w3, net.b3);
  apply_tanh(act.hidden);
  act.mean = affine(act.hidden, net.w4, net.b4);
  if (net.clamp_mean_unit_interval) {
    for (double& v : act.mean.flat()) v = sigmoid(v);
  }
  act.log_var_raw = affine(act.hidden, net.w5, net.b5);
  act.log_var = act.log_var_raw;
  for (double& v : act.log_var.flat()) v = clamp_log_var(v);
  return act;
}

GaussianParams gaussian_forward(const GaussianMlp& net, std::span<const double> input) {
  Matrix in(1, input.size(), Vector(input.begin(), input.end()));
  auto act = gaussian_forward_batch(net, in);
  return {act.mean.data(), act.log_var.data()};
}

double gaussian_loglik(std::span<const double> x, const GaussianParams& p) {
  require(x.size() == p.mean.size() && x.size() == p.log_var.size(),
          "gaussian_loglik: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = x[j] - p.mean[j];
    s += -0.5 * (kLog2Pi + p.log_var[j]) - d * d / (2.0 * std::exp(p.log_var[j]));
  }
  return s;
}

// ---- backward passes ----

Matrix gaussian_backward(const GaussianMlp& net, const Matrix& input,
                         const GaussianActivations& act, const Matrix& d_mean,
                         const Matrix& d_log_var, GaussianMlp* grad, bool want_input_grad) {
  Matrix dm = d_mean;
  if (net.clamp_mean_unit_interval) {
    auto m = act.mean.flat();
    auto g = dm.flat();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= m[i] * (1.0 - m[i]);
  }
  Matrix dl = d_log_var;
  {
    auto raw = act.log_var_raw.flat();
    auto g = dl.flat();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!log_var_active(raw[i])) g[i] = 0.0;
  }
  if (grad) {
    add_into(grad->w4, matmul_at(dm, act.hidden));
    add_column_sums(dm, grad->b4);
    add_into(grad->w5, matmul_at(dl, act.hidden));
    add_column_sums(dl, grad->b5);
  }
  Matrix dh = matmul(dm, net.w4);
  add_into(dh, matmul(dl, net.w5));
  {
    auto h = act.hidden.flat();
    auto g = dh.flat();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - h[i] * h[i];
  }
  if (grad) {
    add_into(grad->w3, matmul_at(dh, input));
    add_column_sums(dh, grad->b3);
  }
  if (!want_input_grad) return {};
  return matmul(dh, net.w3);
}

Vector gaussian_mlp_loglik(const GaussianMlp& net, const Matrix& input, const Matrix& target,
                           std::span<const double> weight, GaussianMlp* grad, Matrix* d_input) {
  auto act = gaussian_forward_batch(net, input);
  require(target.rows() == input.rows() && target.cols() == net.output_dim(),
          "gaussian loglik: target shape " + target.shape_string() + " does not match output " +
              act.mean.shape_string());
  const std::size_t n = input.rows(), d = net.output_dim();
  Vector ll(n);
  Matrix dm(n, d), dl(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const double w = row_weight(weight, r);
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double lv = act.log_var(r, j);
      const double inv_var = std::exp(-lv);
      const double diff = target(r, j) - act.mean(r, j);
      s += -0.5 * (kLog2Pi + lv) - 0.5 * diff * diff * inv_var;
      dm(r, j) = w * diff * inv_var;
      dl(r, j) = w * (-0.5 + 0.5 * diff * diff * inv_var);
    }
    ll[r] = s;
  }
  if (grad || d_input) {
    Matrix di = gaussian_backward(net, input, act, dm, dl, grad, d_input != nullptr);
    if (d_input) *d_input = std::move(di);
  }
  return ll;
}

namespace {

Vector bernoulli_decoder_loglik(const BernoulliMlp& net, const Matrix& z, const Matrix& x,
                                std::span<const double> weight, BernoulliMlp* grad,
                                Matrix* d_z) {
  auto act = bernoulli_forward_batch(net, z);
  require(x.rows() == z.rows() && x.cols() == net.output_dim(),
          "bernoulli loglik: target shape " + x.shape_string() + " does not match output " +
              act.probs.shape_string());
  const std::size_t n = z.rows(), d = net.output_dim();
  Vector ll(n);
  Matrix da(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const double w = row_weight(weight, r);
    ll[r] = bernoulli_loglik(x.row(r), act.probs.row(r));
    for (std::size_t j = 0; j < d; ++j) {
      const double y = act.probs(r, j);
      const bool inside = y > kProbClamp && y < 1.0 - kProbClamp;
      da(r, j) = inside ? w * (x(r, j) - y) : 0.0;
    }
  }
  if (!grad && !d_z) return ll;
  if (grad) {
    add_into(grad->w2, matmul_at(da, act.hidden));
    add_column_sums(da, grad->b2);
  }
  Matrix dh = matmul(da, net.w2);
  {
    auto h = act.hidden.flat();
    auto g = dh.flat();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 1.0 - h[i] * h[i];
  }
  if (grad) {
    add_into(grad->w1, matmul_at(dh, z));
    add_column_sums(dh, grad->b1);
  }
  if (d_z) *d_z = matmul(dh, net.w1);
  return ll;
}

Vector linear_decoder_loglik(const LinearGaussian& net, const Matrix& z, const Matrix& x,
                             std::span<const double> weight, LinearGaussian* grad,
                             Matrix* d_z) {
  net.validate();
  require(z.cols() == net.input_dim(), "linear decoder: input has " +
                                           std::to_string(z.cols()) + " columns, expected " +
                                           std::to_string(net.input_dim()));
  require(x.rows() == z.rows() && x.cols() == net.output_dim(),
          "linear decoder: target shape mismatch");
  Matrix mean = affine(z, net.w, net.b);
  const double raw = net.log_noise_var[0];
  const double lv = clamp_log_var(raw);
  const double inv_var = std::exp(-lv);
  const std::size_t n = z.rows(), d = net.output_dim();
  Vector ll(n);
  Matrix dm(n, d);
  double dlv = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double w = row_weight(weight, r);
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x(r, j) - mean(r, j);
      sq += diff * diff;
      dm(r, j) = w * diff * inv_var;
    }
    ll[r] = -0.5 * static_cast<double>(d) * (kLog2Pi + lv) - 0.5 * sq * inv_var;
    dlv += w * (-0.5 * static_cast<double>(d) + 0.5 * sq * inv_var);
  }
  if (grad) {
    add_into(grad->w, matmul_at(dm, z));
    add_column_sums(dm, grad->b);
    if (log_var_active(raw)) grad->log_noise_var[0] += dlv;
  }
  if (d_z) *d_z = matmul(dm, net.w);
  return ll;
}

}  // namespace

Vector decoder_loglik(const Decoder& dec, const Matrix& z, const Matrix& x,
                      std::span<const double> weight, Decoder* grad, Matrix* d_z) {
  if (!weight.empty()) require(weight.size() == z.rows(), "decoder_loglik: weight length");
  if (grad) require(grad->index() == dec.index(), "decoder_loglik: gradient family mismatch");
  switch (decoder_family(dec)) {
    case DecoderFamily::Bernoulli:
      return bernoulli_decoder_loglik(std::get<BernoulliMlp>(dec), z, x, weight,
                                      grad ? &std::get<BernoulliMlp>(*grad) : nullptr, d_z);
    case DecoderFamily::Gaussian:
      return gaussian_mlp_loglik(std::get<GaussianMlp>(dec), z, x, weight,
                                 grad ? &std::get<GaussianMlp>(*grad) : nullptr, d_z);
    case DecoderFamily::LinearGaussian:
      return linear_decoder_loglik(std::get<LinearGaussian>(dec), z, x, weight,
                                   grad ? &std::get<LinearGaussian>(*grad) : nullptr, d_z);
  }
  return {};
}

Matrix decoder_mean(const Decoder& dec, const Matrix& z) {
  switch (decoder_family(dec)) {
    case DecoderFamily::Bernoulli:
      return bernoulli_forward_batch(std::get<BernoulliMlp>(dec), z).probs;
    case DecoderFamily::Gaussian:
      return gaussian_forward_batch(std::get<GaussianMlp>(dec), z).mean;
    case DecoderFamily::LinearGaussian: {
      const auto& lin = std::get<LinearGaussian>(dec);
      require(z.cols() == lin.input_dim(), "decoder_mean: latent size mismatch");
      return affine(z, lin.w, lin.b);
    }
  }
  return {};
}

Matrix decoder_sample(const Decoder& dec, const Matrix& z, Rng& rng) {
  switch (decoder_family(dec)) {
    case DecoderFamily::Bernoulli: {
      Matrix x = bernoulli_forward_batch(std::get<BernoulliMlp>(dec), z).probs;
      for (double& v : x.flat()) v = rng.uniform() < v ? 1.0 : 0.0;
      return x;
    }
    case DecoderFamily::Gaussian: {
      auto act = gaussian_forward_batch(std::get<GaussianMlp>(dec), z);
      auto m = act.mean.flat();
      auto lv = act.log_var.flat();
      for (std::size_t i = 0; i < m.size(); ++i) m[i] += std::exp(0.5 * lv[i]) * rng.standard_normal();
      return act.mean;
    }
    case DecoderFamily::LinearGaussian: {
      const auto& lin = std::get<LinearGaussian>(dec);
      Matrix x = decoder_mean(dec, z);
      const double sd = std::sqrt(lin.noise_var());
      for (double& v : x.flat()) v += sd * rng.standard_normal();
      return x;
    }
  }
  return {};
}

// ---- VAE objective ----

namespace {

struct VaePass {
  Vector per_point;
  GaussianActivations enc;
  Matrix z;
  Matrix sigma;
};

VaePass vae_pass(const VaeModel& model, const Matrix& x, const Matrix& eps, std::size_t L,
                 Estimator estimator, VaeModel* grad) {
  model.validate();
  const std::size_t B = x.rows(), J = model.latent_dim(), D = model.data_dim();
  require(L >= 1, "vae objective: need at least one noise sample per datapoint");
  require(x.cols() == D, "vae objective: datapoint has " + std::to_string(x.cols()) +
                             " entries, model expects " + std::to_string(D));
  require(eps.rows() == B * L && eps.cols() == J,
          "vae objective: noise matrix " + eps.shape_string() + " does not match " +
              std::to_string(B * L) + "x" + std::to_string(J));

  VaePass pass;
  pass.enc = gaussian_forward_batch(model.encoder, x);
  check_finite(pass.enc.mean, "encoder");
  check_finite(pass.enc.log_var, "encoder");

  pass.sigma = Matrix(B, J);
  for (std::size_t i = 0; i < pass.sigma.size(); ++i)
    pass.sigma.flat()[i] = std::exp(0.5 * pass.enc.log_var.flat()[i]);

  pass.z = Matrix(B * L, J);
  Matrix xrep(B * L, D);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      const std::size_t r = b * L + l;
      for (std::size_t j = 0; j < J; ++j)
        pass.z(r, j) = pass.enc.mean(b, j) + pass.sigma(b, j) * eps(r, j);
      auto src = x.row(b);
      std::copy(src.begin(), src.end(), xrep.row(r).begin());
    }
  }

  const double inv_l = 1.0 / static_cast<double>(L);
  Vector weights(B * L, inv_l);
  Matrix dz;
  Vector ll = decoder_loglik(model.decoder, pass.z, xrep, weights,
                             grad ? &grad->decoder : nullptr, grad ? &dz : nullptr);

  pass.per_point.assign(B, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    double acc = 0.0;
    if (estimator == Estimator::B) {
      for (std::size_t j = 0; j < J; ++j) {
        const double m = pass.enc.mean(b, j), lv = pass.enc.log_var(b, j);
        acc += 0.5 * (1.0 + lv - m * m - std::exp(lv));
      }
      double rec = 0.0;
      for (std::size_t l = 0; l < L; ++l) rec += ll[b * L + l];
      acc += rec * inv_l;
    } else {
      double terms = 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t r = b * L + l;
        double log_pz = 0.0, log_qz = 0.0;
        for (std::size_t j = 0; j < J; ++j) {
          log_pz += -0.5 * (kLog2Pi + pass.z(r, j) * pass.z(r, j));
          log_qz += -0.5 * (kLog2Pi + pass.enc.log_var(b, j) + eps(r, j) * eps(r, j));
        }
        terms += log_pz + ll[r] - log_qz;
      }
      acc = terms * inv_l;
    }
    if (!std::isfinite(acc)) throw NumericError("decoder", "non-finite objective");
    pass.per_point[b] = acc;
  }

  if (grad) {
    if (estimator == Estimator::A) {
      for (std::size_t r = 0; r < B * L; ++r)
        for (std::size_t j = 0; j < J; ++j) dz(r, j) -= inv_l * pass.z(r, j);
    }
    Matrix d_mean(B, J), d_lv(B, J);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t j = 0; j < J; ++j) {
        double gm = 0.0, gl = 0.0;
        for (std::size_t l = 0; l < L; ++l) {
          const std::size_t r = b * L + l;
          gm += dz(r, j);
          gl += dz(r, j) * eps(r, j);
        }
        gl *= 0.5 * pass.sigma(b, j);
        if (estimator == Estimator::B) {
          gm -= pass.enc.mean(b, j);
          gl += 0.5 * (1.0 - std::exp(pass.enc.log_var(b, j)));
        } else {
          gl += 0.5;
        }
        d_mean(b, j) = gm;
        d_lv(b, j) = gl;
      }
    }
    gaussian_backward(model.encoder, x, pass.enc, d_mean, d_lv, &grad->encoder, false);
  }
  return pass;
}

}  // namespace

VaeGradient vae_backward_batch(const VaeModel& model, const Matrix& x, const Matrix& eps,
                               std::size_t samples_per_point, Estimator estimator) {
  VaeGradient out{0.0, {}, VaeModel::zeros(model.shape())};
  auto pass = vae_pass(model, x, eps, samples_per_point, estimator, &out.grad);
  out.per_point = std::move(pass.per_point);
  out.objective = sum(out.per_point);
  return out;
}

VaeGradient vae_backward(const VaeModel& model, std::span<const double> x, const Matrix& eps,
                         Estimator estimator) {
  Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  return vae_backward_batch(model, xm, eps, eps.rows(), estimator);
}

Vector vae_objective_batch(const VaeModel& model, const Matrix& x, const Matrix& eps,
                           std::size_t samples_per_point, Estimator estimator) {
  return vae_pass(model, x, eps, samples_per_point, estimator, nullptr).per_point;
}

}  // namespace aevb
