#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "driftadapt/kspace_mask.hpp"
#include "driftadapt/linops.hpp"
#include "driftadapt/random.hpp"

using namespace driftadapt;

namespace {

const Shape k8{1, 8, 8};

std::vector<std::pair<std::string, Operator>> all_kinds() {
  KspaceMask m = make_kspace_mask(8, 2.0, 0.04, 3);
  KspaceMask perturbed = perturb_line_offsets(m, 2.0, 4);
  return {
      {"identity", make_identity()},
      {"blur7@10", make_motion_blur(7, 10.0)},
      {"bilinear", make_downsample(2, DownsampleKernel::bilinear)},
      {"bicubic", make_downsample(2, DownsampleKernel::bicubic)},
      {"fourier", make_fourier_mask(m, k8)},
      {"fourier_offsets", make_fourier_mask(perturbed, k8)},
      {"composite", compose(make_downsample(2, DownsampleKernel::bilinear), make_motion_blur(3, 45.0))},
  };
}

Tensor random_input(const LinearOperator& A, Shape s, Rng& rng) { return random_tensor(s, A.in_dtype(), rng); }

Eigen::VectorXcd as_vec(const Tensor& t) {
  Eigen::VectorXcd v(static_cast<Eigen::Index>(t.elements()));
  for (std::size_t i = 0; i < t.elements(); ++i)
    v(static_cast<Eigen::Index>(i)) = t.is_complex() ? t.cdata()[i] : cplx(t.data()[i], 0.0);
  return v;
}

double vec_rel(const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

// Direct evaluation of the fractional-frequency k-space sample.
cplx fractional_dft(const Tensor& x, int k, double freq) {
  const int h = x.height(), w = x.width();
  cplx acc{};
  for (int m = 0; m < h; ++m)
    for (int n = 0; n < w; ++n)
      acc += x.c_at(0, m, n) *
             std::polar(1.0, -2.0 * std::numbers::pi * (static_cast<double>(k) * m / h + freq * n / w));
  return acc / std::sqrt(static_cast<double>(h * w));
}

}  // namespace

TEST(Linops, DenseMaterializationMatchesApplyAdjointGram) {
  Rng rng(1);
  for (const auto& [name, A] : all_kinds()) {
    const auto M = materialize_dense(*A, k8);
    for (int t = 0; t < 3; ++t) {
      const Tensor x = random_input(*A, k8, rng);
      const Tensor y = random_tensor(A->out_shape(k8), A->out_dtype(), rng);
      EXPECT_LT(vec_rel(as_vec(A->apply(x)), M * as_vec(x)), 1e-12) << name;
      EXPECT_LT(vec_rel(as_vec(A->adjoint(y)), M.adjoint() * as_vec(y)), 1e-12) << name;
      EXPECT_LT(vec_rel(as_vec(gram(*A, x)), M.adjoint() * M * as_vec(x)), 1e-12) << name;
    }
    const auto Madj = materialize_dense_adjoint(*A, k8);
    EXPECT_LT((Madj - M.adjoint()).norm(), 1e-12 * std::max(1.0, M.norm())) << name;
  }
}

TEST(Linops, AdjointIdentityRandomTrials) {
  Rng rng(2);
  for (const auto& [name, A] : all_kinds()) {
    for (int t = 0; t < 100; ++t) {
      const Tensor u = random_input(*A, k8, rng);
      const Tensor v = random_tensor(A->out_shape(k8), A->out_dtype(), rng);
      const cplx lhs = cdot(A->apply(u), v);
      const cplx rhs = cdot(u, A->adjoint(v));
      EXPECT_LE(std::abs(lhs - rhs), 1e-10 * std::max(1.0, std::abs(lhs))) << name;
    }
  }
}

TEST(Linops, MotionBlurSizeOneIsIdentity) {
  for (double ang : {0.0, 33.0, 179.0}) {
    const auto A = make_motion_blur(1, ang);
    Rng rng(4);
    const Tensor x = random_tensor(k8, DType::real, rng);
    EXPECT_EQ(A->apply(x).vec(), x.vec());
  }
}

TEST(Linops, HorizontalThreeTapKernel) {
  const auto k = motion_blur_kernel(3, 0.0);
  const std::vector<double> expect{0, 0, 0, 1.0 / 3, 1.0 / 3, 1.0 / 3, 0, 0, 0};
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(k[i], expect[i], 1e-15);
  Tensor x(k8);
  x(0, 4, 0) = 1.0;  // impulse on the left edge wraps around
  const Tensor y = make_motion_blur(3, 0.0)->apply(x);
  EXPECT_NEAR(y(0, 4, 7), 1.0 / 3, 1e-15);
  EXPECT_NEAR(y(0, 4, 0), 1.0 / 3, 1e-15);
  EXPECT_NEAR(y(0, 4, 1), 1.0 / 3, 1e-15);
  EXPECT_NEAR(norm(y), std::sqrt(3.0) / 3, 1e-15);
}

TEST(Linops, MotionBlurUnitMassAndErrors) {
  for (double ang : {0.0, 10.0, 20.0, 45.0, 90.0, 135.0}) {
    const auto k = motion_blur_kernel(7, ang);
    double s = 0.0;
    for (double v : k) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(make_motion_blur(4, 10.0), std::invalid_argument);
  EXPECT_THROW(make_motion_blur(7, 180.0), std::invalid_argument);
  EXPECT_THROW(make_motion_blur(7, -1.0), std::invalid_argument);
}

TEST(Linops, BlurDeltaImageMatchesDenseColumn) {
  const auto A = make_motion_blur(7, 10.0);
  const auto M = materialize_dense(*A, k8);
  Tensor e(k8);
  e(0, 0, 0) = 1.0;
  EXPECT_LT(vec_rel(as_vec(A->apply(e)), M.col(0)), 1e-12);
}

TEST(Linops, BlurMatrixIsBlockCirculant) {
  const auto M = materialize_dense(*make_motion_blur(7, 10.0), k8);
  // Row (i, j) equals row (0, 0) shifted by (i, j).
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int p = 0; p < 8; ++p)
        for (int q = 0; q < 8; ++q)
          EXPECT_EQ(M(i * 8 + j, ((p + i) % 8) * 8 + (q + j) % 8), M(0, p * 8 + q));
}

TEST(Linops, DownsamplePreservesConstants) {
  for (auto kind : {DownsampleKernel::bilinear, DownsampleKernel::bicubic}) {
    const auto A = make_downsample(2, kind);
    const Tensor y = A->apply(Tensor::filled({1, 16, 16}, 0.7));
    EXPECT_EQ(y.shape(), (Shape{1, 8, 8}));
    for (double v : y.raw()) EXPECT_NEAR(v, 0.7, 1e-14);
  }
  const auto f = downsample_filter_1d(2, DownsampleKernel::bilinear);
  ASSERT_EQ(f.size(), 4u);
  EXPECT_NEAR(f[0], 0.125, 1e-15);
  EXPECT_NEAR(f[1], 0.375, 1e-15);
  EXPECT_EQ(downsample_filter_1d(2, DownsampleKernel::bicubic).size(), 8u);
  EXPECT_THROW(make_downsample(2, DownsampleKernel::bilinear)->apply(Tensor({1, 9, 8})), ShapeError);
  EXPECT_THROW(make_downsample(1, DownsampleKernel::bilinear), std::invalid_argument);
}

TEST(Linops, DownsampleAdjointOn16x16) {
  Rng rng(6);
  const auto A = make_downsample(2, DownsampleKernel::bilinear);
  for (int t = 0; t < 20; ++t) {
    const Tensor u = random_tensor({1, 16, 16}, DType::real, rng);
    const Tensor v = random_tensor({1, 8, 8}, DType::real, rng);
    EXPECT_NEAR(dot(A->apply(u), v), dot(u, A->adjoint(v)), 1e-10 * std::abs(dot(u, A->adjoint(v))) + 1e-12);
  }
}

TEST(Linops, FullFourierMaskIsUnitary) {
  const auto A = make_fourier_mask(full_kspace_mask(8), k8);
  Rng rng(7);
  const Tensor x = random_tensor(k8, DType::complex, rng);
  EXPECT_LT(norm(gram(*A, x) - x) / norm(x), 1e-10);
  EXPECT_NEAR(norm(A->apply(x)), norm(x), 1e-10 * norm(x));
}

TEST(Linops, ZeroOffsetMaskEqualsMaskedFft) {
  const KspaceMask m = make_kspace_mask(8, 2.0, 0.04, 1);
  const auto A = make_fourier_mask(m, k8);
  Rng rng(8);
  const Tensor x = random_tensor(k8, DType::complex, rng);
  const Tensor X = fft2(x);
  const Tensor y = A->apply(x);
  for (std::size_t l = 0; l < m.sampled_lines.size(); ++l) {
    const int col = ((m.sampled_lines[l] - 4) % 8 + 8) % 8;
    for (int k = 0; k < 8; ++k) EXPECT_LT(std::abs(y.c_at(0, k, static_cast<int>(l)) - X.c_at(0, k, col)), 1e-12);
  }
}

TEST(Linops, FractionalOffsetMatchesDirectDft) {
  KspaceMask m;
  m.width = 8;
  m.sampled_lines = {5};
  m.line_offsets = {0.5};
  const auto A = make_fourier_mask(m, k8);
  Rng rng(9);
  const Tensor x = random_tensor(k8, DType::complex, rng);
  const Tensor y = A->apply(x);
  for (int k = 0; k < 8; ++k) EXPECT_LT(std::abs(y.c_at(0, k, 0) - fractional_dft(x, k, 1.5)), 1e-9);
}

TEST(Linops, FourierGramIsProjection) {
  const auto A = make_fourier_mask(make_kspace_mask(16, 4.0, 0.04, 2), {1, 16, 16});
  Rng rng(10);
  const Tensor x = random_tensor({1, 16, 16}, DType::complex, rng);
  const Tensor g = gram(*A, x);
  EXPECT_LT(norm(gram(*A, g) - g), 1e-12 * norm(g));
}

TEST(Linops, DuplicateLinesRejected) {
  KspaceMask m;
  m.width = 8;
  m.sampled_lines = {3, 3};
  m.line_offsets = {0, 0};
  EXPECT_THROW(make_fourier_mask(m, k8), std::invalid_argument);
  m.sampled_lines = {3, 9};
  EXPECT_THROW(make_fourier_mask(m, k8), std::invalid_argument);
}

TEST(Linops, IdentityGramAdjoint) {
  Rng rng(11);
  const auto A = make_identity();
  const Tensor x = random_tensor(k8, DType::real, rng);
  EXPECT_EQ(A->apply(x).vec(), x.vec());
  EXPECT_EQ(A->adjoint(x).vec(), x.vec());
  EXPECT_EQ(gram(*A, x).vec(), x.vec());
  const auto M = materialize_dense(*A, {1, 4, 4});
  EXPECT_EQ((M - Eigen::MatrixXcd::Identity(16, 16)).norm(), 0.0);
}

TEST(Linops, ShapeAndDtypeErrors) {
  const auto F = make_fourier_mask(make_kspace_mask(8, 2.0), k8);
  EXPECT_THROW(F->apply(Tensor(k8)), DTypeError);
  EXPECT_THROW(F->apply(Tensor({1, 8, 6}, DType::complex)), ShapeError);
  EXPECT_THROW(make_motion_blur(3, 0.0)->apply(Tensor(k8, DType::complex)), DTypeError);
  EXPECT_THROW(materialize_dense(*make_identity(), {1, 65, 64}), ShapeError);
}

TEST(Linops, SigmaJvpMatchesFiniteDifferences) {
  Rng rng(12);
  for (const auto& [name, A] : all_kinds()) {
    const auto sigma = A->params();
    if (sigma.empty()) {
      EXPECT_THROW(d_apply_dsigma(*A, random_input(*A, k8, rng), {}), std::logic_error) << name;
      continue;
    }
    for (int t = 0; t < 5; ++t) {
      const Tensor x = random_input(*A, k8, rng);
      std::vector<double> dir(sigma.size());
      for (double& d : dir) d = rng.normal();
      const double h = 1e-6;
      std::vector<double> sp = sigma, sm = sigma;
      for (std::size_t i = 0; i < sigma.size(); ++i) {
        sp[i] += h * dir[i];
        sm[i] -= h * dir[i];
      }
      Tensor fd = A->with_params(sp)->apply(x) - A->with_params(sm)->apply(x);
      fd *= 1.0 / (2 * h);
      const Tensor an = d_apply_dsigma(*A, x, dir);
      EXPECT_LT(norm(an - fd) / norm(an), 1e-5) << name;

      // d_adjoint is the adjoint of d_apply, and sigma_vjp is its transpose.
      const Tensor v = random_tensor(A->out_shape(k8), A->out_dtype(), rng);
      EXPECT_NEAR(dot(an, v), dot(x, A->d_adjoint(v, dir)), 1e-10 * (1 + std::abs(dot(an, v)))) << name;
      const auto g = A->sigma_vjp(x, v);
      double gd = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) gd += g[i] * dir[i];
      EXPECT_NEAR(gd, dot(v, an), 1e-10 * (1 + std::abs(gd))) << name;
    }
  }
}

TEST(Linops, BlurSingleTapDirectionIsShift) {
  const auto A = make_motion_blur(3, 0.0);
  Rng rng(13);
  const Tensor x = random_tensor(k8, DType::real, rng);
  std::vector<double> dir(9, 0.0);
  dir[1 * 3 + 2] = 1.0;  // tap at (0, +1): shifts right by one
  const Tensor y = d_apply_dsigma(*A, x, dir);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) EXPECT_EQ(y(0, i, j), x(0, i, (j + 7) % 8));
  const Tensor z = d_apply_dsigma(*A, x, std::vector<double>(9, 0.0));
  EXPECT_EQ(norm(z), 0.0);
}

TEST(Linops, KernelOperatorsLinearInSigma) {
  Rng rng(14);
  for (const Operator& A : {make_motion_blur(5, 30.0), make_downsample(2, DownsampleKernel::bicubic)}) {
    const std::size_t q = A->num_params();
    std::vector<double> s1(q), s2(q), mix(q);
    for (std::size_t i = 0; i < q; ++i) {
      s1[i] = rng.normal();
      s2[i] = rng.normal();
      mix[i] = 0.5 * s1[i] - 2.0 * s2[i];
    }
    const Tensor x = random_tensor({1, 8, 8}, DType::real, rng);
    Tensor lhs = A->with_params(mix)->apply(x);
    Tensor rhs = A->with_params(s1)->apply(x) * 0.5 - A->with_params(s2)->apply(x) * 2.0;
    EXPECT_LT(norm(lhs - rhs), 1e-13 * norm(lhs));
  }
}

TEST(Linops, PseudoInverseExamples) {
  Rng rng(15);
  const Tensor x = random_tensor(k8, DType::real, rng);
  EXPECT_EQ(pseudo_inverse_apply(*make_identity(), x, 5).vec(), x.vec());

  const auto F = make_fourier_mask(full_kspace_mask(8), k8);
  const Tensor xc = random_tensor(k8, DType::complex, rng);
  EXPECT_LT(norm(pseudo_inverse_apply(*F, F->apply(xc), 3) - xc), 1e-10 * norm(xc));

  // Invertible 3x3 blur: compare with the dense pseudo-inverse.
  const auto B = make_blur(3, {0.02, 0.05, 0.03, 0.06, 0.7, 0.04, 0.03, 0.05, 0.02});
  const Tensor y = B->apply(x);
  const Tensor rec = pseudo_inverse_apply(*B, y, 200);
  const auto M = materialize_dense(*B, k8);
  const Eigen::VectorXcd oracle = M.completeOrthogonalDecomposition().pseudoInverse() * as_vec(y);
  EXPECT_LT(vec_rel(as_vec(rec), oracle), 1e-6);
  EXPECT_LT(norm(rec - x) / norm(x), 1e-6);
  EXPECT_THROW(pseudo_inverse_apply(*B, y, 0), std::invalid_argument);
}

TEST(Linops, MinimumNormForUnderdeterminedMask) {
  const KspaceMask m = make_kspace_mask(8, 4.0, 0.04, 5);
  const auto A = make_fourier_mask(m, k8);
  Rng rng(16);
  const Tensor y = random_tensor(A->out_shape(k8), DType::complex, rng);
  // With a unitary F the min-norm solution is the zero-filled adjoint.
  EXPECT_LT(norm(pseudo_inverse_apply(*A, y, 10) - A->adjoint(y)), 1e-10 * norm(y));
}

TEST(KspaceMask, CentreLinesAndCount) {
  for (int w : {32, 48, 64, 320}) {
    for (double acc : {2.0, 4.0, 6.0, 8.0}) {
      const KspaceMask m = make_kspace_mask(w, acc, 0.04, 7);
      const int centre = static_cast<int>(std::ceil(0.04 * w));
      EXPECT_EQ(m.center_count(), centre);
      for (int i = 0; i < centre; ++i)
        EXPECT_TRUE(std::binary_search(m.sampled_lines.begin(), m.sampled_lines.end(), m.center_begin() + i));
      EXPECT_LE(std::abs(static_cast<double>(m.sampled_lines.size()) - w / acc), 1.0) << w << " " << acc;
    }
  }
}

TEST(KspaceMask, SeedRegenerationIsStable) {
  const KspaceMask a = make_kspace_mask(64, 6.0, 0.04, 42);
  const KspaceMask b = mask_from_json(nlohmann::json::parse(to_json(a).dump()));
  EXPECT_EQ(a.sampled_lines, b.sampled_lines);
  EXPECT_EQ(a.line_offsets, b.line_offsets);
  EXPECT_NE(make_kspace_mask(64, 6.0, 0.04, 43).sampled_lines, a.sampled_lines);
}

TEST(KspaceMask, SwapsKeepCentreAndCount) {
  const KspaceMask a = make_kspace_mask(64, 6.0, 0.04, 1);
  const int n = 3;
  const KspaceMask b = swap_lines(a, n, 9);
  EXPECT_EQ(a.sampled_lines.size(), b.sampled_lines.size());
  int fresh = 0;
  for (int l : b.sampled_lines) fresh += !std::binary_search(a.sampled_lines.begin(), a.sampled_lines.end(), l);
  EXPECT_EQ(fresh, n);
  for (int i = 0; i < a.center_count(); ++i)
    EXPECT_TRUE(std::binary_search(b.sampled_lines.begin(), b.sampled_lines.end(), a.center_begin() + i));
  EXPECT_THROW(swap_lines(a, 1000, 1), std::invalid_argument);
  EXPECT_EQ(swap_lines(a, 0, 3).sampled_lines, a.sampled_lines);
}

TEST(KspaceMask, PerturbationsStayInRangeAndSkipCentre) {
  const KspaceMask m = perturb_line_offsets(make_kspace_mask(64, 6.0), 2.0, 5);
  for (std::size_t l = 0; l < m.sampled_lines.size(); ++l) {
    EXPECT_LE(std::abs(m.line_offsets[l]), 2.0);
    if (m.is_center(m.sampled_lines[l])) EXPECT_EQ(m.line_offsets[l], 0.0);
  }
}
