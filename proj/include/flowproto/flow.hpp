#pragma once

#include "flowproto/numerics.hpp"
#include "flowproto/rng.hpp"

#include <cstdint>
#include <variant>
#include <vector>

namespace flowproto {

// Every layer is written in the generative direction x = f(z); the training
// code only ever runs the inverse direction, z = f^{-1}(x), which is the
// order in which the stack is stored. Parameters are flattened in stack order
// and, inside a layer, in field declaration order with matrices row-major.

/// Fixed per-dimension affine map applied to raw inputs before the first
/// layer: u = (x - mean) / scale. Not part of the trainable parameters, but
/// its constant log-determinant is part of log_prob.
struct Standardizer {
  Vector mean;
  Vector scale;

  static Standardizer identity(int dim);
  // Population statistics of the columns of `batch`; scales below `floor`
  // are replaced by 1.
  static Standardizer fit(const Matrix& batch, double floor = 1e-12);

  double log_det_inverse() const { return -scale.array().log().sum(); }
};

/// x = z * exp(log_scale) + bias.
struct ActNorm {
  Vector log_scale;
  Vector bias;
  bool initialized = false;

  static ActNorm identity(int dim);
};

/// x = P L U z with P a fixed permutation ((P v)[i] = v[permutation[i]]), L
/// unit lower triangular and U upper triangular with diagonal
/// sign * exp(log_diag). Only the strict triangles and log_diag are trained.
struct InvLinear {
  std::vector<int> permutation;
  Vector lower;  // strict lower triangle, row-major, d(d-1)/2 entries
  Vector upper;  // strict upper triangle, row-major
  Vector log_diag;
  Vector sign;   // +1 / -1, fixed

  static InvLinear identity(int dim);

  int dim() const { return static_cast<int>(permutation.size()); }
  Matrix lower_matrix() const;
  Matrix upper_matrix() const;
  Matrix weight() const;
};

/// Two tanh hidden layers; the output stacks the raw scale head on top of the
/// shift head.
struct MlpConditioner {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix w3;
  Vector b3;

  static MlpConditioner zeros(int inputs, int hidden, int outputs);
  int hidden() const { return static_cast<int>(b1.size()); }
};

/// Parity 0 passes the first floor(d/2) coordinates through and transforms the
/// rest; parity 1 transforms the first d - floor(d/2) and passes the tail.
/// Generative map on the transformed half: x_b = z_b * exp(s) + t with
/// s = clamp * tanh(raw scale head).
struct AffineCoupling {
  int parity = 0;
  double clamp = 2.0;
  MlpConditioner net;

  static AffineCoupling identity(int dim, int parity, int hidden, double clamp);
};

using Layer = std::variant<ActNorm, InvLinear, AffineCoupling>;

int layer_dim(const Layer& layer);
Eigen::Index layer_parameter_count(const Layer& layer);

struct FlowArchitecture {
  int dim = 2;
  int blocks = 4;
  int couplings_per_block = 4;
  int hidden = 64;
  double clamp = 2.0;
  bool random_permutation = true;
};

class FlowModel {
 public:
  explicit FlowModel(int dim);

  /// Default stack: `blocks` repetitions of [ActNorm, InvLinear, Coupling x
  /// couplings_per_block] with alternating coupling parity. Conditioner hidden
  /// layers get N(0, 1/fan_in) weights; output layers start at zero, so the
  /// freshly built model is the identity (up to the permutation).
  static FlowModel build(const FlowArchitecture& arch, Rng& rng);

  int dim() const noexcept { return dim_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const Standardizer& standardizer() const noexcept { return standardizer_; }

  // Mutating accessors invalidate every InverseCache taken on this model.
  std::vector<Layer>& mutable_layers();
  void set_standardizer(Standardizer standardizer);
  void add_layer(Layer layer);

  Eigen::Index parameter_count() const;
  Vector parameters() const;
  void set_parameters(const Vector& theta);

  bool actnorm_initialized() const;

  // Changes whenever parameters change. Copies share the stamp of their source.
  std::uint64_t stamp() const noexcept { return stamp_; }

 private:
  void touch();

  int dim_;
  Standardizer standardizer_;
  std::vector<Layer> layers_;
  std::uint64_t stamp_;
};

// ---------------------------------------------------------------------------
// Per-example operations.

struct InverseResult {
  Vector z;
  double log_det_inv = 0.0;
};

struct ForwardResult {
  Vector x;
  double log_det = 0.0;  // log |det df/dz|, standardizer included
};

Vector forward(const FlowModel& model, const Vector& z);
ForwardResult forward_with_log_det(const FlowModel& model, const Vector& z);
InverseResult inverse(const FlowModel& model, const Vector& x);

/// log p_z(f^{-1}(x)) + log |det d f^{-1} / dx| with a standard normal prior.
double log_prob(const FlowModel& model, const Vector& x);

std::vector<Vector> sample(const FlowModel& model, Rng& rng, int n);

// ---------------------------------------------------------------------------
// Batched passes: one example per column.

struct CouplingActivations {
  Matrix h1;         // tanh hidden 1
  Matrix h2;         // tanh hidden 2
  Matrix tanh_scale; // tanh(raw scale head), so s = clamp * tanh_scale
  Matrix out_b;      // transformed half after the inverse map
};

/// Activations recorded by inverse_batch; owned by the caller so concurrent
/// evaluations may share one model.
struct InverseCache {
  std::uint64_t model_stamp = 0;
  std::vector<Matrix> layer_inputs;  // input of layer i, standardized
  std::vector<CouplingActivations> coupling;  // indexed like layers
  Matrix z;
  Vector log_det_inv;
  Vector log_prob;

  Eigen::Index batch_size() const { return z.cols(); }
};

InverseCache inverse_batch(const FlowModel& model, const Matrix& x);

struct ForwardBatch {
  Matrix x;
  Vector log_det;
};

ForwardBatch forward_batch(const FlowModel& model, const Matrix& z);

struct FlowGradient {
  Vector theta;  // flattened like FlowModel::parameters()
  Matrix x;      // one column per example
};

/// Gradient of G = sum_n grad_logprob[n] * log_prob(x_n) + <grad_z.col(n), z_n>
/// with respect to the parameters and the inputs, using the activations of a
/// matching inverse_batch call. Throws ContractViolation on a stale cache or
/// mismatched shapes. Parameter gradients are reduced over columns in index
/// order, so results are bitwise reproducible.
FlowGradient backward(const FlowModel& model, const InverseCache& cache,
                      const Vector& grad_logprob, const Matrix& grad_z);

// Single-example form of backward for a one-column cache.
FlowGradient backward(const FlowModel& model, const InverseCache& cache, double grad_logprob,
                      const Vector& grad_z);

/// Data-dependent initialization: walks the batch through the stack in the
/// inverse direction and sets every ActNorm so that its output has zero mean
/// and unit (population) variance per dimension, flooring the variance at
/// 1e-6. Throws ContractViolation if the model was already initialized or the
/// batch is empty.
void init_actnorm(FlowModel& model, const Matrix& batch);
void init_actnorm(FlowModel& model, const std::vector<Vector>& batch);

Matrix stack_columns(const std::vector<Vector>& columns, int dim);

}  // namespace flowproto
