#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <caasr/autograd.hpp>
#include <caasr/rng.hpp>

#include <cmath>
#include <functional>
#include <vector>

using namespace caasr;
using ag::Tape;

namespace {

// Central finite differences against the analytic gradient for a scalar-
// valued graph over one or more parameter matrices.
struct GradCheck {
  std::vector<Matd> params;
  std::function<double(Tape<double>&, std::vector<int>&)> build;

  double max_rel_error() {
    Tape<double> tape(true);
    std::vector<int> nodes;
    for (std::size_t i = 0; i < params.size(); ++i) {
      nodes.push_back(tape.add_param(&params[i], static_cast<int>(i)));
    }
    std::vector<int> handles = nodes;
    const double base = build(tape, handles);
    (void)base;
    std::vector<Matd> grads;
    for (const auto& p : params) grads.emplace_back(Matd::Zero(p.rows(), p.cols()));
    tape.backward(handles.back(), &grads);

    const double eps = 1e-6;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      for (int r = 0; r < params[pi].rows(); ++r) {
        for (int c = 0; c < params[pi].cols(); ++c) {
          const double keep = params[pi](r, c);
          auto eval = [&](double v) {
            params[pi](r, c) = v;
            Tape<double> t2(true);
            std::vector<int> h2;
            for (std::size_t i = 0; i < params.size(); ++i) {
              h2.push_back(t2.add_param(&params[i], static_cast<int>(i)));
            }
            const double out = build(t2, h2);
            params[pi](r, c) = keep;
            return out;
          };
          const double numeric = (eval(keep + eps) - eval(keep - eps)) / (2 * eps);
          const double analytic = grads[pi](r, c);
          const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
          worst = std::max(worst, std::abs(numeric - analytic) / denom);
        }
      }
    }
    return worst;
  }
};

Matd random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  Matd m(r, c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  }
  return m;
}

}  // namespace

TEST_CASE("matmul chain gradient") {
  Rng rng(1);
  GradCheck gc;
  gc.params = {random_mat(rng, 3, 4), random_mat(rng, 4, 2)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::matmul(t, h[0], h[1]);
    int loss = ag::mean_rows(t, y);
    loss = ag::matmul(t, loss, ag::transpose(t, loss));
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("relu and bias broadcast gradient") {
  Rng rng(2);
  GradCheck gc;
  gc.params = {random_mat(rng, 5, 3), random_mat(rng, 1, 3)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::relu(t, ag::add_rowvec(t, h[0], h[1]));
    int loss = ag::mean_rows(t, y);
    loss = ag::matmul(t, loss, ag::transpose(t, loss));
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("softmax rows gradient") {
  Rng rng(3);
  GradCheck gc;
  gc.params = {random_mat(rng, 4, 5), random_mat(rng, 5, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::softmax_rows(t, h[0]);
    int v = ag::matmul(t, y, h[1]);  // 4x1
    int loss = ag::matmul(t, ag::transpose(t, v), v);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("causal softmax matches row softmax on allowed prefix") {
  Tape<double> t(false);
  Rng rng(4);
  Matd x = random_mat(rng, 4, 4);
  int a = t.add_input(x);
  int y = ag::causal_softmax_rows(t, a);
  const Matd& out = t.val(y);
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 4; ++c) {
      if (c > r) CHECK(out(r, c) == 0.0);
      sum += out(r, c);
    }
    CHECK(sum == doctest::Approx(1.0));
  }
}

TEST_CASE("causal softmax gradient") {
  Rng rng(5);
  GradCheck gc;
  gc.params = {random_mat(rng, 4, 4), random_mat(rng, 4, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::causal_softmax_rows(t, h[0]);
    int v = ag::matmul(t, y, h[1]);
    int loss = ag::matmul(t, ag::transpose(t, v), v);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("layer norm gradient") {
  Rng rng(6);
  GradCheck gc;
  gc.params = {random_mat(rng, 4, 6), random_mat(rng, 1, 6, 0.5),
               random_mat(rng, 1, 6, 0.5), random_mat(rng, 6, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::layer_norm_rows(t, h[0], h[1], h[2]);
    int v = ag::matmul(t, y, h[3]);
    int loss = ag::matmul(t, ag::transpose(t, v), v);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-5);
}

TEST_CASE("embedding gather gradient") {
  Rng rng(7);
  GradCheck gc;
  gc.params = {random_mat(rng, 6, 4), random_mat(rng, 4, 1)};
  const std::vector<int> ids = {1, 3, 3, 0, 5};
  gc.build = [ids](Tape<double>& t, std::vector<int>& h) {
    int y = ag::embedding(t, h[0], ids);
    int v = ag::matmul(t, y, h[1]);
    int loss = ag::matmul(t, ag::transpose(t, v), v);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("stack slice and downsample gradients") {
  Rng rng(8);
  GradCheck gc;
  gc.params = {random_mat(rng, 3, 4), random_mat(rng, 2, 4), random_mat(rng, 8, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::vstack(t, {h[0], h[1]});       // 5x4
    y = ag::pair_downsample(t, y);             // 3x8 (padded tail)
    int v = ag::matmul(t, y, h[2]);            // 3x1
    int s = ag::slice_rows(t, v, 0, 2);        // 2x1
    int loss = ag::matmul(t, ag::transpose(t, s), s);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("hstack gradient") {
  Rng rng(9);
  GradCheck gc;
  gc.params = {random_mat(rng, 3, 2), random_mat(rng, 3, 3), random_mat(rng, 5, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int y = ag::hstack(t, {h[0], h[1]});  // 3x5
    int v = ag::matmul(t, y, h[2]);
    int loss = ag::matmul(t, ag::transpose(t, v), v);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("cross entropy value and gradient") {
  // zero logits are uniform: loss is ln(V)
  Tape<double> t(false);
  int logits = t.add_input(Matd::Zero(3, 7));
  int loss = ag::cross_entropy(t, logits, {0, 3, 6});
  CHECK(t.val(loss)(0, 0) == doctest::Approx(std::log(7.0)));

  Rng rng(10);
  GradCheck gc;
  gc.params = {random_mat(rng, 4, 5)};
  const std::vector<int> targets = {1, 0, 4, 2};
  gc.build = [targets](Tape<double>& t, std::vector<int>& h) {
    int loss = ag::cross_entropy(t, h[0], targets);
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("cosine similarity values") {
  Tape<double> t(false);
  Matd a(1, 3), b(1, 3);
  a << 1, 0, 0;
  b << 0, 1, 0;
  // identical, orthogonal and opposite vectors
  CHECK(t.val(ag::cosine_similarity(t, t.add_input(a), t.add_input(a)))(0, 0) ==
        doctest::Approx(1.0));
  CHECK(t.val(ag::cosine_similarity(t, t.add_input(a), t.add_input(b)))(0, 0) ==
        doctest::Approx(0.0));
  CHECK(t.val(ag::cosine_similarity(t, t.add_input(a), t.add_input((-a).eval())))(0, 0) ==
        doctest::Approx(-1.0));
  CHECK_THROWS_AS(ag::cosine_similarity(t, t.add_input(Matd::Zero(1, 3)), t.add_input(b)),
                  std::invalid_argument);
}

TEST_CASE("cosine similarity gradient") {
  Rng rng(11);
  GradCheck gc;
  gc.params = {random_mat(rng, 1, 6), random_mat(rng, 1, 6)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int c = ag::cosine_similarity(t, h[0], h[1]);
    int loss = ag::add_const(t, ag::scale(t, c, -1.0), Matd(Matd::Ones(1, 1)));
    h.push_back(loss);
    return t.val(loss)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}

TEST_CASE("cosine loss is scale invariant") {
  Rng rng(12);
  Matd x1 = random_mat(rng, 1, 8);
  Matd x2 = random_mat(rng, 1, 8);
  Tape<double> t(false);
  auto loss_of = [&](const Matd& a, const Matd& b) {
    return 1.0 - t.val(ag::cosine_similarity(t, t.add_input(a), t.add_input(b)))(0, 0);
  };
  const double base = loss_of(x1, x2);
  CHECK(loss_of((3.7 * x1).eval(), (0.2 * x2).eval()) == doctest::Approx(base));
  CHECK(loss_of((0.01 * x1).eval(), (250.0 * x2).eval()) == doctest::Approx(base));
}

TEST_CASE("dropout masks deterministically under a seed") {
  Matd x = Matd::Ones(20, 20);
  auto run = [&](std::uint64_t seed) {
    Tape<double> t(true);
    Rng rng(seed);
    int a = t.add_input(x);
    return t.val(ag::dropout(t, a, 0.25, &rng)).eval();
  };
  CHECK(run(5) == run(5));
  CHECK(run(5) != run(6));
  // kept entries are scaled by 1/(1-p)
  const Matd y = run(5);
  for (int r = 0; r < y.rows(); ++r) {
    for (int c = 0; c < y.cols(); ++c) {
      CHECK((y(r, c) == 0.0 || y(r, c) == doctest::Approx(1.0 / 0.75)));
    }
  }
}

TEST_CASE("mean_rows gradient") {
  Rng rng(13);
  GradCheck gc;
  gc.params = {random_mat(rng, 5, 4), random_mat(rng, 4, 1)};
  gc.build = [](Tape<double>& t, std::vector<int>& h) {
    int m = ag::mean_rows(t, h[0]);
    int v = ag::matmul(t, m, h[1]);
    h.push_back(v);
    return t.val(v)(0, 0);
  };
  CHECK(gc.max_rel_error() < 1e-6);
}
