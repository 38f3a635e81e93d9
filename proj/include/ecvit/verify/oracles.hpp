#pragma once

// Reference implementations written directly from the definitions with plain
// loops over std::vector<double>. They share no code with the tensor ops.

#include <cstdint>
#include <vector>

namespace ecvit::oracle {

using Vec = std::vector<double>;

struct Dims4 {
  std::int64_t n, c, h, w;
};

/// Grouped cross-correlation with zero padding. Returns [n, co, ho, wo].
Vec conv2d(const Vec& x, Dims4 xd, const Vec& w, Dims4 wd, const Vec& bias, std::int64_t sh, std::int64_t sw,
           std::int64_t ph, std::int64_t pw, std::int64_t groups, Dims4* out_dims);

/// Sliding-window maximum; padded cells never win.
Vec maxpool2d(const Vec& x, Dims4 xd, std::int64_t k, std::int64_t stride, std::int64_t pad, Dims4* out_dims);

/// Max over groups of k consecutive rows of x[b, n, d].
Vec group_max(const Vec& x, std::int64_t b, std::int64_t n, std::int64_t d, std::int64_t k);

/// Error function by its Maclaurin series (accurate for |x| < 4).
double erf_series(double x);
double gelu(double x);

/// Multi-head attention for one sequence x[L, D] with wqkv[D, 3D] (no bias).
/// `null_slot` adds a key with logit 0 and value 0 to every softmax.
Vec attention(const Vec& x, std::int64_t L, std::int64_t D, const Vec& wqkv, std::int64_t heads,
              bool null_slot = false);

/// Partitioned attention on x[B, N+1, D]: blocks of M patch tokens each with a
/// copy of cls, block outputs reassembled, cls outputs averaged, then the
/// output projection wout[D, D] + bout.
Vec pmsa(const Vec& x, std::int64_t B, std::int64_t N, std::int64_t D, std::int64_t M, const Vec& wqkv,
         const Vec& wout, const Vec& bout, std::int64_t heads);

/// I-FFN on patch tokens of x[B, N+1, D] laid out on a rows x cols grid:
/// depthwise (k,1) and (1,k) convolutions with bias, batchnorm with the given
/// statistics (batch statistics when `train`), then GELU. Returns [B, N, D].
Vec iffn(const Vec& x, std::int64_t B, std::int64_t rows, std::int64_t cols, std::int64_t D, const Vec& w_row,
         const Vec& b_row, const Vec& w_col, const Vec& b_col, std::int64_t k, const Vec& gamma, const Vec& beta,
         const Vec& mean, const Vec& var, bool train);

/// Bilinear sample of an h x w plane at output size oh x ow, half-pixel centers.
Vec bilinear(const Vec& plane, std::int64_t h, std::int64_t w, std::int64_t oh, std::int64_t ow);

}  // namespace ecvit::oracle
