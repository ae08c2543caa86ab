#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <vector>

namespace flowproto {

// All arithmetic is 64-bit. Example vectors (inputs x and latents z) are
// column vectors; batches are stored one example per column.
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// log(sum(exp(v))) with max-shift. Throws DomainError on empty input.
double logsumexp(const Vector& v);

/// exp(v_i) / sum_j exp(v_j), computed from the shifted exponentials.
Vector softmax(const Vector& v);

/// log(softmax(v)), evaluated as v - logsumexp(v).
Vector log_softmax(const Vector& v);

// Index of the largest entry; ties resolve to the lowest index.
Eigen::Index argmax(const Vector& v);

bool all_finite(const Vector& v);

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay.

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 5e-5;
};

struct AdamState {
  AdamHyper hyper;
  std::int64_t step = 0;
  Vector first_moment;
  Vector second_moment;

  static AdamState zeros(Eigen::Index size, const AdamHyper& hyper = {});
};

/// One bias-corrected Adam update. Weight decay is applied to the parameters
/// (params -= lr * weight_decay * params) before the moment-based delta and
/// never enters the moment estimates. Throws ContractViolation on length
/// mismatch.
void adam_step(Vector& params, const Vector& grads, AdamState& state);

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<double(const Vector&)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
/// A non-finite evaluation raises NumericError naming the coordinate.
Vector finite_diff_grad(const ScalarFunction& f, const Vector& x, double h);

// Round-half-to-even of numerator / denominator for nonnegative integers.
std::int64_t div_round_half_even(std::int64_t numerator, std::int64_t denominator);

}  // namespace flowproto
