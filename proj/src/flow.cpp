#include "flowproto/flow.hpp"

#include "flowproto/errors.hpp"

#include <atomic>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace flowproto {
namespace {

std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// Coordinates passed through a coupling and coordinates it transforms; both
// are contiguous.
struct Halves {
  int pass_begin;
  int pass_size;
  int trans_begin;
  int trans_size;
};

Halves halves(int dim, int parity) {
  const int pass = dim / 2;
  const int trans = dim - pass;
  if (parity == 0) return {0, pass, pass, trans};
  return {trans, pass, 0, trans};
}

// Flattening helpers. Matrices are visited row-major.
void put(const Matrix& m, double*& out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) *out++ = m(r, c);
}
void put(const Vector& v, double*& out) {
  for (Eigen::Index i = 0; i < v.size(); ++i) *out++ = v[i];
}
void take(Matrix& m, const double*& in) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = *in++;
}
void take(Vector& v, const double*& in) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = *in++;
}

void write_params(const Layer& layer, double*& out) {
  std::visit(overloaded{
                 [&](const ActNorm& l) {
                   put(l.log_scale, out);
                   put(l.bias, out);
                 },
                 [&](const InvLinear& l) {
                   put(l.lower, out);
                   put(l.upper, out);
                   put(l.log_diag, out);
                 },
                 [&](const AffineCoupling& l) {
                   put(l.net.w1, out);
                   put(l.net.b1, out);
                   put(l.net.w2, out);
                   put(l.net.b2, out);
                   put(l.net.w3, out);
                   put(l.net.b3, out);
                 },
             },
             layer);
}

void read_params(Layer& layer, const double*& in) {
  std::visit(overloaded{
                 [&](ActNorm& l) {
                   take(l.log_scale, in);
                   take(l.bias, in);
                 },
                 [&](InvLinear& l) {
                   take(l.lower, in);
                   take(l.upper, in);
                   take(l.log_diag, in);
                 },
                 [&](AffineCoupling& l) {
                   take(l.net.w1, in);
                   take(l.net.b1, in);
                   take(l.net.w2, in);
                   take(l.net.b2, in);
                   take(l.net.w3, in);
                   take(l.net.b3, in);
                 },
             },
             layer);
}

void check_finite(const Matrix& m, const char* op, std::size_t layer_index) {
  if (!m.allFinite()) {
    throw NumericError(std::string(op) + ": non-finite activation at layer " +
                       std::to_string(layer_index));
  }
}

void check_input(const FlowModel& model, const Matrix& m, const char* op) {
  if (m.rows() != model.dim()) {
    throw ContractViolation(std::string(op) + ": expected dimension " +
                            std::to_string(model.dim()) + ", got " + std::to_string(m.rows()));
  }
  if (!m.allFinite()) throw ContractViolation(std::string(op) + ": input is not finite");
}

// Permutation helpers: (P v)[i] = v[perm[i]].
Matrix apply_perm(const std::vector<int>& perm, const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(perm[i]);
  return out;
}
Matrix apply_perm_transpose(const std::vector<int>& perm, const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(perm[i]) = m.row(static_cast<Eigen::Index>(i));
  return out;
}

struct ConditionerOut {
  Matrix h1;
  Matrix h2;
  Matrix tanh_scale;
  Matrix shift;
};

ConditionerOut run_conditioner(const AffineCoupling& c, const Matrix& pass) {
  const int m = static_cast<int>(c.net.b3.size() / 2);
  ConditionerOut out;
  out.h1 = ((c.net.w1 * pass).colwise() + c.net.b1).array().tanh().matrix();
  out.h2 = ((c.net.w2 * out.h1).colwise() + c.net.b2).array().tanh().matrix();
  Matrix head = (c.net.w3 * out.h2).colwise() + c.net.b3;
  out.tanh_scale = head.topRows(m).array().tanh().matrix();
  out.shift = head.bottomRows(m);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

Standardizer Standardizer::identity(int dim) { return {Vector::Zero(dim), Vector::Ones(dim)}; }

Standardizer Standardizer::fit(const Matrix& batch, double floor) {
  if (batch.cols() == 0) throw ContractViolation("Standardizer::fit: empty batch");
  const double n = static_cast<double>(batch.cols());
  Standardizer s;
  s.mean = batch.rowwise().sum() / n;
  Matrix centered = batch.colwise() - s.mean;
  s.scale = (centered.array().square().rowwise().sum() / n).sqrt().matrix();
  for (Eigen::Index i = 0; i < s.scale.size(); ++i) {
    if (!(s.scale[i] >= floor)) s.scale[i] = 1.0;
  }
  return s;
}

ActNorm ActNorm::identity(int dim) { return {Vector::Zero(dim), Vector::Zero(dim), false}; }

InvLinear InvLinear::identity(int dim) {
  InvLinear l;
  l.permutation.resize(static_cast<std::size_t>(dim));
  std::iota(l.permutation.begin(), l.permutation.end(), 0);
  const Eigen::Index tri = static_cast<Eigen::Index>(dim) * (dim - 1) / 2;
  l.lower = Vector::Zero(tri);
  l.upper = Vector::Zero(tri);
  l.log_diag = Vector::Zero(dim);
  l.sign = Vector::Ones(dim);
  return l;
}

Matrix InvLinear::lower_matrix() const {
  const int d = dim();
  Matrix m = Matrix::Identity(d, d);
  Eigen::Index k = 0;
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < r; ++c) m(r, c) = lower[k++];
  return m;
}

Matrix InvLinear::upper_matrix() const {
  const int d = dim();
  Matrix m = Matrix::Zero(d, d);
  Eigen::Index k = 0;
  for (int r = 0; r < d; ++r) {
    m(r, r) = sign[r] * std::exp(log_diag[r]);
    for (int c = r + 1; c < d; ++c) m(r, c) = upper[k++];
  }
  return m;
}

Matrix InvLinear::weight() const { return apply_perm(permutation, lower_matrix() * upper_matrix()); }

MlpConditioner MlpConditioner::zeros(int inputs, int hidden, int outputs) {
  return {Matrix::Zero(hidden, inputs), Vector::Zero(hidden), Matrix::Zero(hidden, hidden),
          Vector::Zero(hidden),         Matrix::Zero(outputs, hidden), Vector::Zero(outputs)};
}

AffineCoupling AffineCoupling::identity(int dim, int parity, int hidden, double clamp) {
  const Halves h = halves(dim, parity);
  return {parity, clamp, MlpConditioner::zeros(h.pass_size, hidden, 2 * h.trans_size)};
}

int layer_dim(const Layer& layer) {
  return std::visit(overloaded{
                        [](const ActNorm& l) { return static_cast<int>(l.bias.size()); },
                        [](const InvLinear& l) { return l.dim(); },
                        [](const AffineCoupling& l) {
                          return static_cast<int>(l.net.w1.cols() + l.net.b3.size() / 2);
                        },
                    },
                    layer);
}

Eigen::Index layer_parameter_count(const Layer& layer) {
  return std::visit(overloaded{
                        [](const ActNorm& l) { return l.log_scale.size() + l.bias.size(); },
                        [](const InvLinear& l) {
                          return l.lower.size() + l.upper.size() + l.log_diag.size();
                        },
                        [](const AffineCoupling& l) {
                          return l.net.w1.size() + l.net.b1.size() + l.net.w2.size() +
                                 l.net.b2.size() + l.net.w3.size() + l.net.b3.size();
                        },
                    },
                    layer);
}

// ---------------------------------------------------------------------------

FlowModel::FlowModel(int dim)
    : dim_(dim), standardizer_(Standardizer::identity(dim)), stamp_(next_stamp()) {
  if (dim <= 0) throw ContractViolation("FlowModel: dimension must be positive");
}

FlowModel FlowModel::build(const FlowArchitecture& arch, Rng& rng) {
  if (arch.blocks < 0 || arch.couplings_per_block < 0 || arch.hidden <= 0 || !(arch.clamp > 0)) {
    throw ConfigError("FlowArchitecture: blocks/couplings must be >= 0, hidden > 0, clamp > 0");
  }
  FlowModel model(arch.dim);
  const int d = arch.dim;
  for (int b = 0; b < arch.blocks; ++b) {
    model.add_layer(ActNorm::identity(d));
    InvLinear lin = InvLinear::identity(d);
    if (arch.random_permutation) rng.shuffle(lin.permutation);
    model.add_layer(std::move(lin));
    for (int c = 0; c < arch.couplings_per_block; ++c) {
      AffineCoupling coupling = AffineCoupling::identity(d, c % 2, arch.hidden, arch.clamp);
      auto init = [&rng](Matrix& w) {
        if (w.cols() == 0) return;
        const double stddev = 1.0 / std::sqrt(static_cast<double>(w.cols()));
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          for (Eigen::Index k = 0; k < w.cols(); ++k) w(r, k) = stddev * rng.standard_normal();
      };
      init(coupling.net.w1);
      init(coupling.net.w2);
      model.add_layer(std::move(coupling));
    }
  }
  return model;
}

void FlowModel::touch() { stamp_ = next_stamp(); }

std::vector<Layer>& FlowModel::mutable_layers() {
  touch();
  return layers_;
}

void FlowModel::set_standardizer(Standardizer standardizer) {
  if (standardizer.mean.size() != dim_ || standardizer.scale.size() != dim_) {
    throw ContractViolation("set_standardizer: dimension mismatch");
  }
  if (!(standardizer.scale.array() > 0).all()) {
    throw ContractViolation("set_standardizer: scales must be positive");
  }
  standardizer_ = std::move(standardizer);
  touch();
}

void FlowModel::add_layer(Layer layer) {
  if (layer_dim(layer) != dim_) {
    throw ContractViolation("add_layer: layer dimension " + std::to_string(layer_dim(layer)) +
                            " does not match model dimension " + std::to_string(dim_));
  }
  layers_.push_back(std::move(layer));
  touch();
}

Eigen::Index FlowModel::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& l : layers_) n += layer_parameter_count(l);
  return n;
}

Vector FlowModel::parameters() const {
  Vector theta(parameter_count());
  double* out = theta.data();
  for (const auto& l : layers_) write_params(l, out);
  return theta;
}

void FlowModel::set_parameters(const Vector& theta) {
  if (theta.size() != parameter_count()) {
    throw ContractViolation("set_parameters: expected " + std::to_string(parameter_count()) +
                            " values, got " + std::to_string(theta.size()));
  }
  const double* in = theta.data();
  for (auto& l : layers_) read_params(l, in);
  touch();
}

bool FlowModel::actnorm_initialized() const {
  for (const auto& l : layers_) {
    if (const auto* a = std::get_if<ActNorm>(&l); a && !a->initialized) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------

Matrix stack_columns(const std::vector<Vector>& columns, int dim) {
  Matrix m(dim, static_cast<Eigen::Index>(columns.size()));
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i].size() != dim) {
      throw ContractViolation("stack_columns: expected dimension " + std::to_string(dim) +
                              ", got " + std::to_string(columns[i].size()));
    }
    m.col(static_cast<Eigen::Index>(i)) = columns[i];
  }
  return m;
}

InverseCache inverse_batch(const FlowModel& model, const Matrix& x) {
  check_input(model, x, "inverse");
  const auto& layers = model.layers();
  const Standardizer& st = model.standardizer();
  InverseCache cache;
  cache.model_stamp = model.stamp();
  cache.layer_inputs.reserve(layers.size());
  cache.coupling.resize(layers.size());

  Matrix a = (x.colwise() - st.mean).array().colwise() / st.scale.array();
  Vector log_det = Vector::Constant(x.cols(), st.log_det_inverse());

  for (std::size_t i = 0; i < layers.size(); ++i) {
    cache.layer_inputs.push_back(a);
    std::visit(overloaded{
                   [&](const ActNorm& l) {
                     a = ((a.colwise() - l.bias).array().colwise() * (-l.log_scale).array().exp())
                             .matrix();
                     log_det.array() -= l.log_scale.sum();
                   },
                   [&](const InvLinear& l) {
                     Matrix y = apply_perm_transpose(l.permutation, a);
                     l.lower_matrix().triangularView<Eigen::UnitLower>().solveInPlace(y);
                     l.upper_matrix().triangularView<Eigen::Upper>().solveInPlace(y);
                     a = std::move(y);
                     log_det.array() -= l.log_diag.sum();
                   },
                   [&](const AffineCoupling& l) {
                     const Halves h = halves(model.dim(), l.parity);
                     ConditionerOut c = run_conditioner(l, a.middleRows(h.pass_begin, h.pass_size));
                     Matrix scale = l.clamp * c.tanh_scale;
                     Matrix out_b = ((a.middleRows(h.trans_begin, h.trans_size) - c.shift).array() *
                                     (-scale).array().exp())
                                        .matrix();
                     a.middleRows(h.trans_begin, h.trans_size) = out_b;
                     log_det -= scale.colwise().sum().transpose();
                     cache.coupling[i] = {std::move(c.h1), std::move(c.h2), std::move(c.tanh_scale),
                                          std::move(out_b)};
                   },
               },
               layers[i]);
    check_finite(a, "inverse", i);
  }

  const double log_norm = 0.5 * static_cast<double>(model.dim()) * std::log(2.0 * std::numbers::pi);
  cache.log_prob = (-0.5 * a.colwise().squaredNorm().transpose().array() - log_norm).matrix() + log_det;
  cache.log_det_inv = std::move(log_det);
  cache.z = std::move(a);
  return cache;
}

ForwardBatch forward_batch(const FlowModel& model, const Matrix& z) {
  check_input(model, z, "forward");
  const auto& layers = model.layers();
  Matrix a = z;
  Vector log_det = Vector::Zero(z.cols());
  for (std::size_t k = layers.size(); k-- > 0;) {
    std::visit(overloaded{
                   [&](const ActNorm& l) {
                     a = ((a.array().colwise() * l.log_scale.array().exp()).matrix().colwise() +
                          l.bias);
                     log_det.array() += l.log_scale.sum();
                   },
                   [&](const InvLinear& l) {
                     Matrix y = l.upper_matrix() * a;
                     y = l.lower_matrix() * y;
                     a = apply_perm(l.permutation, y);
                     log_det.array() += l.log_diag.sum();
                   },
                   [&](const AffineCoupling& l) {
                     const Halves h = halves(model.dim(), l.parity);
                     ConditionerOut c = run_conditioner(l, a.middleRows(h.pass_begin, h.pass_size));
                     Matrix scale = l.clamp * c.tanh_scale;
                     a.middleRows(h.trans_begin, h.trans_size) =
                         (a.middleRows(h.trans_begin, h.trans_size).array() * scale.array().exp())
                             .matrix() +
                         c.shift;
                     log_det += scale.colwise().sum().transpose();
                   },
               },
               layers[k]);
    check_finite(a, "forward", k);
  }
  const Standardizer& st = model.standardizer();
  a = (a.array().colwise() * st.scale.array()).matrix().colwise() + st.mean;
  log_det.array() -= st.log_det_inverse();
  return {std::move(a), std::move(log_det)};
}

FlowGradient backward(const FlowModel& model, const InverseCache& cache,
                      const Vector& grad_logprob, const Matrix& grad_z) {
  if (cache.model_stamp != model.stamp() || cache.layer_inputs.size() != model.layers().size()) {
    throw ContractViolation("backward: activation cache is stale or from another model");
  }
  const Eigen::Index n = cache.batch_size();
  if (grad_logprob.size() != n || grad_z.cols() != n || grad_z.rows() != model.dim()) {
    throw ContractViolation("backward: cotangent shapes do not match the cached batch");
  }
  const auto& layers = model.layers();

  FlowGradient grad;
  grad.theta = Vector::Zero(model.parameter_count());
  Eigen::Index offset = grad.theta.size();
  const double g_lp_total = grad_logprob.sum();

  // d/dz of grad_logprob * (-0.5 |z|^2) plus the direct latent cotangent.
  Matrix g = grad_z - (cache.z.array().rowwise() * grad_logprob.transpose().array()).matrix();

  for (std::size_t i = layers.size(); i-- > 0;) {
    const Matrix& input = cache.layer_inputs[i];
    offset -= layer_parameter_count(layers[i]);
    Layer layer_grad = layers[i];
    std::visit(
        overloaded{
            [&](const ActNorm& l) {
              auto& out = std::get<ActNorm>(layer_grad);
              Vector inv_scale = (-l.log_scale).array().exp();
              Matrix y = (input.colwise() - l.bias).array().colwise() * inv_scale.array();
              out.log_scale = -(g.array() * y.array()).rowwise().sum().matrix();
              out.log_scale.array() -= g_lp_total;
              g = (g.array().colwise() * inv_scale.array()).matrix();
              out.bias = -g.rowwise().sum();
            },
            [&](const InvLinear& l) {
              auto& out = std::get<InvLinear>(layer_grad);
              const int d = l.dim();
              Matrix lo = l.lower_matrix();
              Matrix up = l.upper_matrix();
              const Matrix& y = (i + 1 < layers.size()) ? cache.layer_inputs[i + 1] : cache.z;
              // g_in = P L^{-T} U^{-T} g
              Matrix t = g;
              up.transpose().triangularView<Eigen::Lower>().solveInPlace(t);
              lo.transpose().triangularView<Eigen::UnitUpper>().solveInPlace(t);
              Matrix g_in = apply_perm(l.permutation, t);
              Matrix g_w = -(g_in * y.transpose());
              Matrix pt_gw = apply_perm_transpose(l.permutation, g_w);
              Matrix g_lower = pt_gw * up.transpose();
              Matrix g_upper = lo.transpose() * pt_gw;
              Eigen::Index k = 0;
              for (int r = 0; r < d; ++r)
                for (int c = 0; c < r; ++c) out.lower[k++] = g_lower(r, c);
              k = 0;
              for (int r = 0; r < d; ++r) {
                out.log_diag[r] = g_upper(r, r) * up(r, r) - g_lp_total;
                for (int c = r + 1; c < d; ++c) out.upper[k++] = g_upper(r, c);
              }
              g = std::move(g_in);
            },
            [&](const AffineCoupling& l) {
              auto& out = std::get<AffineCoupling>(layer_grad);
              const CouplingActivations& act = cache.coupling[i];
              const Halves h = halves(model.dim(), l.parity);
              auto pass = input.middleRows(h.pass_begin, h.pass_size);
              Matrix scale = l.clamp * act.tanh_scale;
              Matrix inv_exp = (-scale).array().exp();
              Matrix g_b = g.middleRows(h.trans_begin, h.trans_size);

              Matrix g_shift = -(g_b.array() * inv_exp.array()).matrix();
              Matrix g_scale = -(g_b.array() * act.out_b.array()).matrix();
              g_scale.array().rowwise() -= grad_logprob.transpose().array();
              Matrix g_raw = (g_scale.array() * l.clamp *
                              (1.0 - act.tanh_scale.array().square()))
                                 .matrix();
              Matrix g_head(g_raw.rows() + g_shift.rows(), n);
              g_head << g_raw, g_shift;

              out.net.w3 = g_head * act.h2.transpose();
              out.net.b3 = g_head.rowwise().sum();
              Matrix g_h2 = (l.net.w3.transpose() * g_head).array() * (1.0 - act.h2.array().square());
              out.net.w2 = g_h2 * act.h1.transpose();
              out.net.b2 = g_h2.rowwise().sum();
              Matrix g_h1 = (l.net.w2.transpose() * g_h2).array() * (1.0 - act.h1.array().square());
              out.net.w1 = g_h1 * pass.transpose();
              out.net.b1 = g_h1.rowwise().sum();

              g.middleRows(h.pass_begin, h.pass_size) += l.net.w1.transpose() * g_h1;
              g.middleRows(h.trans_begin, h.trans_size) = (g_b.array() * inv_exp.array()).matrix();
            },
        },
        layers[i]);
    double* dst = grad.theta.data() + offset;
    write_params(layer_grad, dst);
  }

  const Standardizer& st = model.standardizer();
  grad.x = (g.array().colwise() / st.scale.array()).matrix();
  return grad;
}

FlowGradient backward(const FlowModel& model, const InverseCache& cache, double grad_logprob,
                      const Vector& grad_z) {
  if (cache.batch_size() != 1) throw ContractViolation("backward: expected a single-example cache");
  return backward(model, cache, Vector::Constant(1, grad_logprob), Matrix(grad_z));
}

// ---------------------------------------------------------------------------

InverseResult inverse(const FlowModel& model, const Vector& x) {
  InverseCache cache = inverse_batch(model, Matrix(x));
  return {cache.z.col(0), cache.log_det_inv[0]};
}

double log_prob(const FlowModel& model, const Vector& x) {
  return inverse_batch(model, Matrix(x)).log_prob[0];
}

Vector forward(const FlowModel& model, const Vector& z) { return forward_batch(model, Matrix(z)).x.col(0); }

ForwardResult forward_with_log_det(const FlowModel& model, const Vector& z) {
  ForwardBatch fb = forward_batch(model, Matrix(z));
  return {fb.x.col(0), fb.log_det[0]};
}

std::vector<Vector> sample(const FlowModel& model, Rng& rng, int n) {
  if (n < 0) throw DomainError("sample: n must be nonnegative");
  std::vector<Vector> out;
  if (n == 0) return out;
  Matrix z(model.dim(), n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < model.dim(); ++i) z(i, j) = rng.standard_normal();
  Matrix x = forward_batch(model, z).x;
  out.reserve(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) out.emplace_back(x.col(j));
  return out;
}

void init_actnorm(FlowModel& model, const Matrix& batch) {
  if (batch.cols() == 0) throw ContractViolation("init_actnorm: empty batch");
  check_input(model, batch, "init_actnorm");
  for (const auto& l : model.layers()) {
    if (const auto* a = std::get_if<ActNorm>(&l); a && a->initialized) {
      throw ContractViolation("init_actnorm: model is already initialized");
    }
  }
  const Standardizer& st = model.standardizer();
  Matrix a = (batch.colwise() - st.mean).array().colwise() / st.scale.array();
  const double n = static_cast<double>(batch.cols());
  auto& layers = model.mutable_layers();
  for (auto& layer : layers) {
    if (auto* act = std::get_if<ActNorm>(&layer)) {
      act->bias = a.rowwise().sum() / n;
      Matrix centered = a.colwise() - act->bias;
      Vector var = centered.array().square().rowwise().sum() / n;
      act->log_scale = 0.5 * var.array().max(1e-6).log();
      act->initialized = true;
    }
    // Push the batch through the freshly initialized prefix.
    FlowModel prefix(model.dim());
    prefix.add_layer(layer);
    a = inverse_batch(prefix, a).z;
  }
}

void init_actnorm(FlowModel& model, const std::vector<Vector>& batch) {
  init_actnorm(model, stack_columns(batch, model.dim()));
}

}  // namespace flowproto
