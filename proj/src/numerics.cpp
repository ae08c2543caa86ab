#include "flowproto/numerics.hpp"

#include "flowproto/errors.hpp"

#include <cmath>
#include <string>

namespace flowproto {

double logsumexp(const Vector& v) {
  if (v.size() == 0) throw DomainError("logsumexp: empty vector");
  const double shift = v.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) sum += std::exp(v[i] - shift);
  return shift + std::log(sum);
}

Vector softmax(const Vector& v) {
  if (v.size() == 0) throw DomainError("softmax: empty vector");
  const double shift = v.maxCoeff();
  Vector out = (v.array() - shift).exp().matrix();
  out /= out.sum();
  return out;
}

Vector log_softmax(const Vector& v) { return (v.array() - logsumexp(v)).matrix(); }

Eigen::Index argmax(const Vector& v) {
  if (v.size() == 0) throw DomainError("argmax: empty vector");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

bool all_finite(const Vector& v) { return v.allFinite(); }

AdamState AdamState::zeros(Eigen::Index size, const AdamHyper& hyper) {
  AdamState state;
  state.hyper = hyper;
  state.first_moment = Vector::Zero(size);
  state.second_moment = Vector::Zero(size);
  return state;
}

void adam_step(Vector& params, const Vector& grads, AdamState& state) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ContractViolation("adam_step: length mismatch (params " + std::to_string(params.size()) +
                            ", grads " + std::to_string(grads.size()) + ", moments " +
                            std::to_string(state.first_moment.size()) + ")");
  }
  const AdamHyper& h = state.hyper;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(h.beta1, t);
  const double bias2 = 1.0 - std::pow(h.beta2, t);

  if (h.weight_decay != 0.0) params -= (h.lr * h.weight_decay) * params;

  state.first_moment = h.beta1 * state.first_moment + (1.0 - h.beta1) * grads;
  state.second_moment =
      h.beta2 * state.second_moment + (1.0 - h.beta2) * grads.cwiseProduct(grads);

  auto m_hat = state.first_moment.array() / bias1;
  auto v_hat = state.second_moment.array() / bias2;
  params.array() -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
}

Vector finite_diff_grad(const ScalarFunction& f, const Vector& x, double h) {
  if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
  Vector grad(x.size());
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

std::int64_t div_round_half_even(std::int64_t numerator, std::int64_t denominator) {
  if (denominator <= 0 || numerator < 0) {
    throw DomainError("div_round_half_even: expects numerator >= 0, denominator > 0");
  }
  std::int64_t quotient = numerator / denominator;
  const std::int64_t twice_rem = 2 * (numerator % denominator);
  if (twice_rem > denominator || (twice_rem == denominator && (quotient % 2) == 1)) ++quotient;
  return quotient;
}

}  // namespace flowproto
