#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "essa/error.hpp"
#include "essa/lowrank.hpp"
#include "essa/rng.hpp"
#include "test_util.hpp"

using namespace essa;

namespace {

// One-sided Jacobi SVD: rotate column pairs of a tall copy until they are
// mutually orthogonal; the column norms are then the singular values.
std::vector<double> jacobi_singular_values(const Matrix& input) {
  Eigen::MatrixXd m = input.rows() >= input.cols() ? Eigen::MatrixXd(input) : Eigen::MatrixXd(input.transpose());
  const auto n = m.cols();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double alpha = m.col(p).squaredNorm();
        const double beta = m.col(q).squaredNorm();
        const double gamma = m.col(p).dot(m.col(q));
        if (std::abs(gamma) <= 1e-300) continue;
        off = std::max(off, std::abs(gamma) / std::sqrt(alpha * beta));
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        const Eigen::VectorXd cp = m.col(p);
        m.col(p) = c * cp - s * m.col(q);
        m.col(q) = s * cp + c * m.col(q);
      }
    }
    if (off < 1e-15) break;
  }
  std::vector<double> sv;
  for (Eigen::Index j = 0; j < n; ++j) sv.push_back(m.col(j).norm());
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out = Matrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      out(i, j) = acc;
    }
  }
  return out;
}

LowRankAdapter random_adapter(const std::string& name, int m, int r, int n, std::uint64_t seed) {
  LowRankAdapter a;
  a.name = name;
  a.b = test::gaussian_matrix(m, r, seed, 1);
  a.a = test::gaussian_matrix(r, n, seed, 2);
  return decompose(a);
}

}  // namespace

TEST_CASE("svd of the 2x2 identity") {
  const auto f = svd(Matrix::Identity(2, 2));
  CHECK(f.sigma(0) == doctest::Approx(1.0));
  CHECK(f.sigma(1) == doctest::Approx(1.0));
  CHECK((f.u * f.vt - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("svd of diag(3, 1)") {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 3.0;
  d(1, 1) = 1.0;
  const auto f = svd(d);
  CHECK(f.sigma(0) == doctest::Approx(3.0));
  CHECK(f.sigma(1) == doctest::Approx(1.0));
}

TEST_CASE("svd of a seeded 4x8 matrix agrees with the Jacobi oracle") {
  const Matrix m = test::gaussian_matrix(4, 8, 42, 0);
  const auto f = svd(m);
  const auto oracle = jacobi_singular_values(m);
  REQUIRE(f.sigma.size() == 4);
  for (int i = 0; i < 4; ++i) CHECK(std::abs(f.sigma(i) - oracle[static_cast<std::size_t>(i)]) < 1e-8);
  CHECK(relative_error(f.reconstruct(), m) < 1e-12);
}

TEST_CASE("svd sign convention and ordering") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Matrix m = test::gaussian_matrix(6, 3, seed, 7);
    const auto f = svd(m);
    for (Eigen::Index i = 1; i < f.sigma.size(); ++i) CHECK(f.sigma(i - 1) >= f.sigma(i));
    for (Eigen::Index j = 0; j < f.u.cols(); ++j) {
      for (Eigen::Index i = 0; i < f.u.rows(); ++i) {
        if (std::abs(f.u(i, j)) > 1e-12) {
          CHECK(f.u(i, j) > 0.0);
          break;
        }
      }
    }
  }
}

TEST_CASE("decompose rejects non-finite entries") {
  LowRankAdapter a;
  a.name = "x";
  a.b = Matrix::Ones(4, 2);
  a.a = Matrix::Ones(2, 4);
  a.a(1, 1) = std::nan("");
  CHECK(test::error_code([&] { decompose(a); }) == ErrorCode::kInvalidMatrix);
}

TEST_CASE("zero perturbation round-trips for every supported rank") {
  int checked = 0;
  for (int rank : {4, 8, 16, 32, 64}) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto seed = static_cast<std::uint64_t>(rank * 100 + trial);
      const std::vector<LowRankAdapter> adapters{random_adapter("w", 64 + trial, rank, 72, seed)};
      const auto layout = build_layout(adapters, 40.0);
      const Vector x = Vector::Zero(static_cast<Eigen::Index>(layout.dim()));
      const auto out = apply_candidate(adapters, layout, std::span(x.data(), layout.dim()));
      const Matrix want = naive_matmul(adapters[0].b, adapters[0].a);
      CHECK(relative_error(delta_weight(out[0].b, out[0].a), want) <= 1e-6);
      ++checked;
    }
  }
  CHECK(checked == 100);
}

TEST_CASE("rank-1 perturbation of sigma_A matches the outer-product oracle") {
  const std::vector<LowRankAdapter> adapters{random_adapter("w", 5, 1, 7, 3)};
  const auto layout = build_layout(adapters, 100.0);
  REQUIRE(layout.dim() == 2);
  const double delta = 0.37;
  Vector x = Vector::Zero(2);
  x(0) = delta;  // factor A comes first
  const auto out = apply_candidate(adapters, layout, std::span(x.data(), 2));
  const auto& f = *adapters[0].svd_a;
  const Matrix oracle = delta * f.u.col(0) * f.vt.row(0);
  CHECK(((out[0].a - adapters[0].a) - oracle).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((out[0].b - adapters[0].b).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("layout sizes") {
  SUBCASE("4 adapters, rank 16, p = 40") {
    std::vector<LowRankAdapter> adapters;
    for (int i = 0; i < 4; ++i) adapters.push_back(random_adapter("w" + std::to_string(i), 20, 16, 20, 50 + i));
    const auto layout = build_layout(adapters, 40.0);
    CHECK(layout.dim() == 56);
    CHECK(top_count(16, 40.0) == 7);
  }
  SUBCASE("1 adapter, rank 8, p = 100") {
    const std::vector<LowRankAdapter> adapters{random_adapter("w", 10, 8, 10, 9)};
    CHECK(build_layout(adapters, 100.0).dim() == 16);
  }
  SUBCASE("2 adapters, rank 4, p = 25") {
    const std::vector<LowRankAdapter> adapters{random_adapter("b", 6, 4, 6, 1), random_adapter("a", 6, 4, 6, 2)};
    const auto layout = build_layout(adapters, 25.0);
    REQUIRE(layout.dim() == 4);
    for (const auto& e : layout.entries) CHECK(e.index == 0);
    // name order, then A before B
    CHECK(layout.entries[0] == LayoutEntry{"a", Factor::kA, 0});
    CHECK(layout.entries[1] == LayoutEntry{"a", Factor::kB, 0});
    CHECK(layout.entries[2] == LayoutEntry{"b", Factor::kA, 0});
  }
  SUBCASE("percent out of range") {
    const std::vector<LowRankAdapter> adapters{random_adapter("w", 6, 4, 6, 1)};
    CHECK(test::error_code([&] { build_layout(adapters, 0.0); }) == ErrorCode::kInvalidConfig);
    CHECK(test::error_code([&] { build_layout(adapters, 100.5); }) == ErrorCode::kInvalidConfig);
  }
  SUBCASE("undecomposed adapter") {
    LowRankAdapter raw;
    raw.name = "w";
    raw.b = Matrix::Ones(4, 2);
    raw.a = Matrix::Ones(2, 4);
    const std::vector<LowRankAdapter> adapters{raw};
    CHECK(test::error_code([&] { build_layout(adapters, 50.0); }) == ErrorCode::kNotDecomposed);
  }
}

TEST_CASE("layouts are monotone in p") {
  std::vector<LowRankAdapter> adapters{random_adapter("q", 12, 8, 12, 1), random_adapter("k", 12, 8, 12, 2)};
  const std::vector<double> ps{5, 12.5, 25, 40, 60, 99, 100};
  for (std::size_t i = 1; i < ps.size(); ++i) {
    const auto small = build_layout(adapters, ps[i - 1]);
    const auto large = build_layout(adapters, ps[i]);
    for (const auto& e : small.entries) {
      CHECK(std::find(large.entries.begin(), large.entries.end(), e) != large.entries.end());
    }
  }
}

TEST_CASE("apply_candidate is additive, pure and order independent") {
  const std::vector<LowRankAdapter> adapters{random_adapter("o", 9, 4, 11, 5), random_adapter("v", 9, 4, 11, 6)};
  const auto before = encode_adapters(adapters);
  const auto layout = build_layout(adapters, 50.0);
  const auto n = static_cast<Eigen::Index>(layout.dim());
  CounterRng rng(77, 0);
  Vector x1(n), x2(n);
  for (auto& v : x1) v = rng.normal();
  for (auto& v : x2) v = rng.normal();
  const Vector sum = x1 + x2;

  // Reconstruction is linear in sigma for fixed U, V.
  const auto r1 = apply_candidate(adapters, layout, std::span(x1.data(), layout.dim()));
  const auto r2 = apply_candidate(adapters, layout, std::span(x2.data(), layout.dim()));
  const auto rs = apply_candidate(adapters, layout, std::span(sum.data(), layout.dim()));
  const auto r1_again = apply_candidate(adapters, layout, std::span(x1.data(), layout.dim()));
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    CHECK(((r1[i].a - adapters[i].a) + (r2[i].a - adapters[i].a) - (rs[i].a - adapters[i].a)).cwiseAbs().maxCoeff() <
          1e-10);
    CHECK(((r1[i].b - adapters[i].b) + (r2[i].b - adapters[i].b) - (rs[i].b - adapters[i].b)).cwiseAbs().maxCoeff() <
          1e-10);
    CHECK(r1[i].a == r1_again[i].a);
    CHECK(r1[i].b == r1_again[i].b);
  }
  CHECK(encode_adapters(adapters) == before);
}

TEST_CASE("negative singular values are accepted") {
  Matrix a = Matrix::Zero(1, 3);
  a(0, 0) = 2.0;
  LowRankAdapter ad;
  ad.name = "w";
  ad.b = Matrix::Ones(3, 1);
  ad.a = a;
  const std::vector<LowRankAdapter> adapters{decompose(ad)};
  const auto layout = build_layout(adapters, 100.0);
  Vector x = Vector::Zero(2);
  x(0) = -3.0;
  const auto out = apply_candidate(adapters, layout, std::span(x.data(), 2));
  CHECK(out[0].a(0, 0) == doctest::Approx(-1.0));
}

TEST_CASE("apply_candidate errors") {
  const std::vector<LowRankAdapter> adapters{random_adapter("w", 6, 2, 6, 1)};
  const auto layout = build_layout(adapters, 100.0);
  Vector wrong = Vector::Zero(3);
  CHECK(test::error_code([&] { apply_candidate(adapters, layout, std::span(wrong.data(), 3)); }) ==
        ErrorCode::kLayoutMismatch);
  Vector bad = Vector::Zero(4);
  bad(2) = std::numeric_limits<double>::infinity();
  CHECK(test::error_code([&] { apply_candidate(adapters, layout, std::span(bad.data(), 4)); }) ==
        ErrorCode::kInvalidCandidate);
}

TEST_CASE("delta_weight") {
  SUBCASE("zero B gives zero") {
    CHECK(delta_weight(Matrix::Zero(3, 2), Matrix::Ones(2, 4)).isZero());
  }
  SUBCASE("rank-1 product by hand") {
    Matrix b(2, 1);
    b << 1, 0;
    Matrix a(1, 2);
    a << 2, 3;
    Matrix want(2, 2);
    want << 2, 3, 0, 0;
    CHECK(delta_weight(b, a) == want);
  }
  SUBCASE("seeded factors match the naive triple loop, serial and parallel") {
    const Matrix b = test::gaussian_matrix(6, 2, 11, 0);
    const Matrix a = test::gaussian_matrix(2, 4, 11, 1);
    const Matrix want = naive_matmul(b, a);
    CHECK((delta_weight(b, a) - want).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(delta_weight(b, a, kernels::Exec::kParallel) == delta_weight(b, a, kernels::Exec::kSerial));
  }
  SUBCASE("shape mismatch") {
    CHECK(test::error_code([] { delta_weight(Matrix::Ones(3, 2), Matrix::Ones(3, 2)); }) == ErrorCode::kShapeError);
  }
}

TEST_CASE("adapter container round-trip and corruption") {
  std::vector<LowRankAdapter> adapters{random_adapter("layer0.Q", 8, 4, 8, 1), random_adapter("layer0.K", 8, 4, 8, 2)};
  const auto bytes = encode_adapters(adapters);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "ESSA");
  const auto back = decode_adapters(bytes);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "layer0.Q");
  CHECK(encode_adapters(back) == bytes);
  // Stored as f32, so the decoded values are the f32 rounding of the originals.
  CHECK((back[1].a - adapters[1].a).cwiseAbs().maxCoeff() < 1e-6);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK(test::error_code([&] { decode_adapters(truncated); }) == ErrorCode::kCorruptCheckpoint);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(test::error_code([&] { decode_adapters(bad_magic); }) == ErrorCode::kCorruptCheckpoint);

  const auto path = test::temp_dir("lowrank") / "a.essa";
  save_adapters(path, adapters);
  CHECK(encode_adapters(load_adapters(path)) == bytes);
}
