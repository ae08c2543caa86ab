#include <doctest.h>

#include "flowproto/errors.hpp"
#include "flowproto/flow.hpp"
#include "test_support.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>

using namespace flowproto;
using flowproto::testing::gradient_check_error;
using flowproto::testing::numeric_log_abs_det;
using flowproto::testing::random_model;
using flowproto::testing::random_vector;

namespace {

FlowModel single_actnorm(double log_scale, double bias) {
  FlowModel model(1);
  ActNorm act = ActNorm::identity(1);
  act.log_scale[0] = log_scale;
  act.bias[0] = bias;
  act.initialized = true;
  model.add_layer(act);
  return model;
}

FlowModel identity_model(int dim) {
  FlowArchitecture arch;
  arch.dim = dim;
  arch.hidden = 8;
  arch.random_permutation = false;
  Rng rng(1);
  return FlowModel::build(arch, rng);
}

double standard_normal_log_density(const Vector& x) {
  return -0.5 * x.squaredNorm() -
         0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

TEST_CASE("identity initialization") {
  FlowModel model = identity_model(3);
  Vector x(3);
  x << 0.4, -1.2, 2.5;
  CHECK(forward(model, x) == x);
  InverseResult inv = inverse(model, x);
  CHECK(inv.z == x);
  CHECK(inv.log_det_inv == 0.0);
  CHECK(log_prob(model, x) == standard_normal_log_density(x));

  FlowModel two = identity_model(2);
  CHECK(log_prob(two, Vector::Zero(2)) == doctest::Approx(-1.83787706640934548).epsilon(1e-15));
}

TEST_CASE("single actnorm closed forms") {
  FlowModel model = single_actnorm(std::log(2.0), 1.0);
  CHECK(forward(model, Vector::Constant(1, 0.0))[0] == doctest::Approx(1.0));
  CHECK(forward(model, Vector::Constant(1, 3.0))[0] == doctest::Approx(7.0));
  InverseResult inv = inverse(model, Vector::Constant(1, 1.0));
  CHECK(inv.z[0] == doctest::Approx(0.0));
  CHECK(inv.log_det_inv == doctest::Approx(-std::log(2.0)));
  CHECK(log_prob(model, Vector::Constant(1, 1.0)) ==
        doctest::Approx(-1.61208571376461805).epsilon(1e-14));
}

TEST_CASE("round trip over random models") {
  Rng rng(100);
  for (int trial = 0; trial < 40; ++trial) {
    const int d = 1 + static_cast<int>(rng.uniform_index(7));
    FlowModel model = random_model(d, 1 + static_cast<int>(rng.uniform_index(2)), 4, 6, rng);
    Vector x = random_vector(d, rng, -10.0, 10.0);
    InverseResult inv = inverse(model, x);
    CHECK((forward(model, inv.z) - x).cwiseAbs().maxCoeff() < 1e-8);
    Vector z = random_vector(d, rng, -3.0, 3.0);
    CHECK((inverse(model, forward(model, z)).z - z).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("log-det matches a brute-force Jacobian") {
  Rng rng(200);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + static_cast<int>(rng.uniform_index(6));
    FlowModel model = random_model(d, 1, 4, 6, rng);
    Vector x = random_vector(d, rng, -2.0, 2.0);
    CHECK(std::abs(inverse(model, x).log_det_inv - numeric_log_abs_det(model, x)) < 1e-6);
  }
}

TEST_CASE("trained 2-D model integrates to one on the grid") {
  FlowModel model = flowproto::testing::trained_2d_model(7);
  const double mass = flowproto::testing::grid_mass(model, -8.0, 8.0, 0.05);
  MESSAGE("mass " << std::setprecision(10) << mass);
  CHECK(std::abs(mass - 1.0) < 1e-2);
}

TEST_CASE("forward log-det is the negated inverse log-det") {
  Rng rng(300);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 2 + static_cast<int>(rng.uniform_index(4));
    FlowModel model = random_model(d, 2, 4, 6, rng);
    Vector z = random_vector(d, rng, -2.0, 2.0);
    ForwardResult fwd = forward_with_log_det(model, z);
    CHECK(std::abs(fwd.log_det + inverse(model, fwd.x).log_det_inv) < 1e-9);
  }
}

TEST_CASE("standardizer contributes its constant log-det") {
  FlowModel model = identity_model(2);
  Standardizer st;
  st.mean = Vector::Constant(2, 1.0);
  st.scale = Vector::Constant(2, 2.0);
  model.set_standardizer(st);
  Vector x(2);
  x << 3.0, -1.0;
  InverseResult inv = inverse(model, x);
  CHECK(inv.z[0] == doctest::Approx(1.0));
  CHECK(inv.z[1] == doctest::Approx(-1.0));
  CHECK(inv.log_det_inv == doctest::Approx(-2.0 * std::log(2.0)));
  CHECK((forward(model, inv.z) - x).norm() < 1e-12);
}

TEST_CASE("sampling") {
  FlowModel identity = identity_model(2);
  Rng a(9);
  CHECK(sample(identity, a, 0).empty());
  Rng b(9), c(9);
  auto draws = sample(identity, b, 3);
  for (const auto& s : draws) {
    CHECK(s[0] == c.standard_normal());
    CHECK(s[1] == c.standard_normal());
  }

  FlowModel affine = single_actnorm(std::log(2.0), 1.0);
  Rng rng(10);
  auto xs = sample(affine, rng, 100000);
  double sum = 0.0, sum_sq = 0.0;
  for (const auto& x : xs) {
    sum += x[0];
    sum_sq += x[0] * x[0];
  }
  const double mean = sum / xs.size();
  const double stddev = std::sqrt(sum_sq / xs.size() - mean * mean);
  CHECK(std::abs(mean - 1.0) < 0.02);
  CHECK(std::abs(stddev - 2.0) < 0.05);
}

TEST_CASE("backward: zero cotangents give zero gradients") {
  Rng rng(400);
  FlowModel model = random_model(3, 1, 4, 5, rng);
  Matrix x = Matrix::Random(3, 4);
  InverseCache cache = inverse_batch(model, x);
  FlowGradient g = backward(model, cache, Vector::Zero(4), Matrix::Zero(3, 4));
  CHECK(g.theta.cwiseAbs().maxCoeff() == 0.0);
  CHECK(g.x.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backward: 1-D actnorm closed form") {
  const double a = 0.3, b = -0.4;
  FlowModel model = single_actnorm(a, b);
  Vector x = Vector::Constant(1, 1.7);
  InverseCache cache = inverse_batch(model, Matrix(x));
  const double z = cache.z(0, 0);
  FlowGradient g = backward(model, cache, 1.0, Vector::Zero(1));
  // Parameter order: log_scale, bias.
  CHECK(g.theta[0] == doctest::Approx(z * z - 1.0).epsilon(1e-14));
  CHECK(g.theta[1] == doctest::Approx(z * std::exp(-a)).epsilon(1e-14));
}

TEST_CASE("backward matches finite differences in parameters and inputs") {
  Rng rng(500);
  for (int trial = 0; trial < 20; ++trial) {
    const int d = 1 + static_cast<int>(rng.uniform_index(6));
    const int n = 1 + static_cast<int>(rng.uniform_index(3));
    FlowModel model = random_model(d, 1 + static_cast<int>(rng.uniform_index(2)), 4, 5, rng);
    Matrix x(d, n), gz(d, n);
    Vector glp(n);
    for (int j = 0; j < n; ++j) {
      x.col(j) = random_vector(d, rng, -2.0, 2.0);
      gz.col(j) = random_vector(d, rng, -1.0, 1.0);
      glp[j] = rng.uniform(-1.0, 1.0);
    }
    auto objective = [&](const FlowModel& m, const Matrix& inputs) {
      InverseCache c = inverse_batch(m, inputs);
      return glp.dot(c.log_prob) + (gz.array() * c.z.array()).sum();
    };
    InverseCache cache = inverse_batch(model, x);
    FlowGradient g = backward(model, cache, glp, gz);

    const Vector theta0 = model.parameters();
    FlowModel probe = model;
    Vector numeric_theta = finite_diff_grad(
        [&](const Vector& theta) {
          probe.set_parameters(theta);
          return objective(probe, x);
        },
        theta0, 1e-5);
    CHECK(gradient_check_error(g.theta, numeric_theta) < 1e-4);

    Vector flat_x = Eigen::Map<const Vector>(x.data(), x.size());
    Vector numeric_x = finite_diff_grad(
        [&](const Vector& v) { return objective(model, Eigen::Map<const Matrix>(v.data(), d, n)); },
        flat_x, 1e-5);
    Vector analytic_x = Eigen::Map<const Vector>(g.x.data(), g.x.size());
    CHECK(gradient_check_error(analytic_x, numeric_x) < 1e-4);
  }
}

TEST_CASE("backward rejects a stale cache") {
  Rng rng(600);
  FlowModel model = random_model(2, 1, 2, 4, rng);
  InverseCache cache = inverse_batch(model, Matrix::Ones(2, 1));
  model.set_parameters(model.parameters());
  CHECK_THROWS_AS(backward(model, cache, 1.0, Vector::Zero(2)), ContractViolation);
  CHECK_THROWS_AS(backward(model, InverseCache{}, 1.0, Vector::Zero(2)), ContractViolation);
}

TEST_CASE("dimension mismatch is a contract violation") {
  FlowModel model = identity_model(2);
  CHECK_THROWS_AS(inverse(model, Vector::Zero(3)), ContractViolation);
  CHECK_THROWS_AS(forward(model, Vector::Zero(1)), ContractViolation);
}

TEST_CASE("non-finite intermediate reports the layer") {
  FlowModel model = single_actnorm(-800.0, 0.0);
  try {
    inverse(model, Vector::Constant(1, 1.0));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 0") != std::string::npos);
  }
}

TEST_CASE("init_actnorm") {
  SUBCASE("standardized batch is a fixed point") {
    FlowModel model(2);
    model.add_layer(ActNorm::identity(2));
    Matrix batch(2, 4);
    batch << 1, -1, 1, -1, 1, 1, -1, -1;
    init_actnorm(model, batch);
    const auto& act = std::get<ActNorm>(model.layers()[0]);
    CHECK(act.log_scale.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(act.bias.cwiseAbs().maxCoeff() < 1e-15);
    CHECK(act.initialized);
    CHECK_THROWS_AS(init_actnorm(model, batch), ContractViolation);
  }
  SUBCASE("constant batch engages the variance floor") {
    FlowModel model(2);
    model.add_layer(ActNorm::identity(2));
    Matrix batch(2, 3);
    batch << 2.5, 2.5, 2.5, -1, -1, -1;
    init_actnorm(model, batch);
    const auto& act = std::get<ActNorm>(model.layers()[0]);
    CHECK(act.log_scale[0] == doctest::Approx(0.5 * std::log(1e-6)));
    Vector z = inverse(model, batch.col(0)).z;
    CHECK(z.cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("random batch is standardized") {
    Rng rng(700);
    FlowModel model(3);
    model.add_layer(ActNorm::identity(3));
    Matrix batch(3, 50);
    for (int j = 0; j < 50; ++j) batch.col(j) = random_vector(3, rng, -4.0, 9.0);
    init_actnorm(model, batch);
    Matrix z = inverse_batch(model, batch).z;
    Vector mean = z.rowwise().mean();
    Vector var = (z.colwise() - mean).array().square().rowwise().mean();
    CHECK(mean.cwiseAbs().maxCoeff() < 1e-10);
    CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-8);
  }
  SUBCASE("deep model: every actnorm output is standardized") {
    Rng rng(701);
    FlowModel model = random_model(4, 3, 2, 5, rng);
    for (auto& layer : model.mutable_layers()) {
      if (auto* act = std::get_if<ActNorm>(&layer)) act->initialized = false;
    }
    Matrix batch(4, 64);
    for (int j = 0; j < 64; ++j) batch.col(j) = random_vector(4, rng, -3.0, 3.0);
    init_actnorm(model, batch);
    CHECK(model.actnorm_initialized());
    InverseCache cache = inverse_batch(model, batch);
    for (std::size_t i = 0; i < model.layers().size(); ++i) {
      if (!std::holds_alternative<ActNorm>(model.layers()[i])) continue;
      const Matrix& out = i + 1 < model.layers().size() ? cache.layer_inputs[i + 1] : cache.z;
      Vector mean = out.rowwise().mean();
      Vector var = (out.colwise() - mean).array().square().rowwise().mean();
      CHECK(mean.cwiseAbs().maxCoeff() < 1e-10);
      CHECK((var.array() - 1.0).abs().maxCoeff() < 1e-8);
    }
  }
  SUBCASE("empty batch") {
    FlowModel model(2);
    model.add_layer(ActNorm::identity(2));
    CHECK_THROWS_AS(init_actnorm(model, Matrix(2, 0)), ContractViolation);
  }
}

TEST_CASE("parameter flattening round trip and documented order") {
  Rng rng(800);
  FlowModel model = random_model(3, 1, 2, 4, rng);
  Vector theta = model.parameters();
  FlowModel other = model;
  other.set_parameters(Vector::Zero(theta.size()));
  other.set_parameters(theta);
  CHECK(other.parameters() == theta);

  // First block: ActNorm(log_scale, bias) leads the vector.
  const auto& act = std::get<ActNorm>(model.layers()[0]);
  CHECK(theta.head(3) == act.log_scale);
  CHECK(theta.segment(3, 3) == act.bias);
  // Coupling weights are row-major.
  const auto& coupling = std::get<AffineCoupling>(model.layers()[2]);
  const Eigen::Index coupling_offset = 6 + 3 + 3 + 3;
  CHECK(theta[coupling_offset] == coupling.net.w1(0, 0));
  if (coupling.net.w1.rows() > 1) CHECK(theta[coupling_offset + coupling.net.w1.cols()] == coupling.net.w1(1, 0));
}
