#include "ecvit/verify/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace ecvit::oracle {

Vec conv2d(const Vec& x, Dims4 xd, const Vec& w, Dims4 wd, const Vec& bias, std::int64_t sh, std::int64_t sw,
           std::int64_t ph, std::int64_t pw, std::int64_t groups, Dims4* out_dims) {
  const std::int64_t co = wd.n, cig = wd.c, kh = wd.h, kw = wd.w;
  const std::int64_t ho = (xd.h + 2 * ph - kh) / sh + 1;
  const std::int64_t wo = (xd.w + 2 * pw - kw) / sw + 1;
  const std::int64_t cog = co / groups;
  Vec y(static_cast<std::size_t>(xd.n * co * ho * wo), 0.0);
  for (std::int64_t n = 0; n < xd.n; ++n)
    for (std::int64_t o = 0; o < co; ++o)
      for (std::int64_t i = 0; i < ho; ++i)
        for (std::int64_t j = 0; j < wo; ++j) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
          const std::int64_t g = o / cog;
          for (std::int64_t c = 0; c < cig; ++c)
            for (std::int64_t a = 0; a < kh; ++a)
              for (std::int64_t b = 0; b < kw; ++b) {
                const std::int64_t r = i * sh - ph + a, s = j * sw - pw + b;
                if (r < 0 || r >= xd.h || s < 0 || s >= xd.w) continue;
                const std::int64_t ci = g * cig + c;
                acc += x[static_cast<std::size_t>(((n * xd.c + ci) * xd.h + r) * xd.w + s)] *
                       w[static_cast<std::size_t>(((o * cig + c) * kh + a) * kw + b)];
              }
          y[static_cast<std::size_t>(((n * co + o) * ho + i) * wo + j)] = acc;
        }
  if (out_dims) *out_dims = {xd.n, co, ho, wo};
  return y;
}

Vec maxpool2d(const Vec& x, Dims4 xd, std::int64_t k, std::int64_t stride, std::int64_t pad, Dims4* out_dims) {
  const std::int64_t ho = (xd.h + 2 * pad - k) / stride + 1;
  const std::int64_t wo = (xd.w + 2 * pad - k) / stride + 1;
  Vec y;
  for (std::int64_t p = 0; p < xd.n * xd.c; ++p)
    for (std::int64_t i = 0; i < ho; ++i)
      for (std::int64_t j = 0; j < wo; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::int64_t a = 0; a < k; ++a)
          for (std::int64_t b = 0; b < k; ++b) {
            const std::int64_t r = i * stride - pad + a, s = j * stride - pad + b;
            if (r >= 0 && r < xd.h && s >= 0 && s < xd.w) {
              best = std::max(best, x[static_cast<std::size_t>((p * xd.h + r) * xd.w + s)]);
            }
          }
        y.push_back(best);
      }
  if (out_dims) *out_dims = {xd.n, xd.c, ho, wo};
  return y;
}

Vec group_max(const Vec& x, std::int64_t b, std::int64_t n, std::int64_t d, std::int64_t k) {
  Vec y(static_cast<std::size_t>(b * (n / k) * d));
  for (std::int64_t s = 0; s < b; ++s)
    for (std::int64_t g = 0; g < n / k; ++g)
      for (std::int64_t f = 0; f < d; ++f) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::int64_t t = g * k; t < (g + 1) * k; ++t) best = std::max(best, x[static_cast<std::size_t>((s * n + t) * d + f)]);
        y[static_cast<std::size_t>((s * (n / k) + g) * d + f)] = best;
      }
  return y;
}

double erf_series(double x) {
  // erf(x) = 2/sqrt(pi) * sum_n (-1)^n x^(2n+1) / (n! (2n+1))
  double term = x, sum = x;
  for (int n = 1; n < 200; ++n) {
    term *= -x * x / n;
    const double add = term / (2 * n + 1);
    sum += add;
    if (std::abs(add) < 1e-18 * std::abs(sum)) break;
  }
  return sum * 2.0 / std::sqrt(std::acos(-1.0));
}

double gelu(double x) { return 0.5 * x * (1.0 + erf_series(x / std::sqrt(2.0))); }

Vec attention(const Vec& x, std::int64_t L, std::int64_t D, const Vec& wqkv, std::int64_t heads, bool null_slot) {
  const std::int64_t hd = D / heads;
  // Project every token: qkv[t][j] = sum_i x[t][i] * wqkv[i][j].
  Vec qkv(static_cast<std::size_t>(L * 3 * D), 0.0);
  for (std::int64_t t = 0; t < L; ++t)
    for (std::int64_t j = 0; j < 3 * D; ++j) {
      double acc = 0;
      for (std::int64_t i = 0; i < D; ++i) acc += x[static_cast<std::size_t>(t * D + i)] * wqkv[static_cast<std::size_t>(i * 3 * D + j)];
      qkv[static_cast<std::size_t>(t * 3 * D + j)] = acc;
    }
  auto q = [&](std::int64_t t, std::int64_t h, std::int64_t e) { return qkv[static_cast<std::size_t>(t * 3 * D + h * hd + e)]; };
  auto k = [&](std::int64_t t, std::int64_t h, std::int64_t e) { return qkv[static_cast<std::size_t>(t * 3 * D + D + h * hd + e)]; };
  auto v = [&](std::int64_t t, std::int64_t h, std::int64_t e) { return qkv[static_cast<std::size_t>(t * 3 * D + 2 * D + h * hd + e)]; };
  Vec out(static_cast<std::size_t>(L * D), 0.0);
  for (std::int64_t h = 0; h < heads; ++h)
    for (std::int64_t t = 0; t < L; ++t) {
      Vec logits(static_cast<std::size_t>(L));
      for (std::int64_t s = 0; s < L; ++s) {
        double dot = 0;
        for (std::int64_t e = 0; e < hd; ++e) dot += q(t, h, e) * k(s, h, e);
        logits[static_cast<std::size_t>(s)] = dot / std::sqrt(static_cast<double>(hd));
      }
      double mx = *std::max_element(logits.begin(), logits.end());
      if (null_slot) mx = std::max(mx, 0.0);
      double z = null_slot ? std::exp(-mx) : 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::int64_t e = 0; e < hd; ++e) {
        double acc = 0;
        for (std::int64_t s = 0; s < L; ++s) acc += logits[static_cast<std::size_t>(s)] * v(s, h, e);
        out[static_cast<std::size_t>(t * D + h * hd + e)] = acc / z;
      }
    }
  return out;
}

Vec pmsa(const Vec& x, std::int64_t B, std::int64_t N, std::int64_t D, std::int64_t M, const Vec& wqkv,
         const Vec& wout, const Vec& bout, std::int64_t heads) {
  const std::int64_t nb = N / M;
  Vec pre(static_cast<std::size_t>(B * (N + 1) * D), 0.0);
  for (std::int64_t b = 0; b < B; ++b) {
    const double* seq = x.data() + b * (N + 1) * D;
    for (std::int64_t blk = 0; blk < nb; ++blk) {
      Vec tokens(seq, seq + D);  // cls copy
      tokens.insert(tokens.end(), seq + (1 + blk * M) * D, seq + (1 + (blk + 1) * M) * D);
      const Vec o = attention(tokens, M + 1, D, wqkv, heads);
      double* dst = pre.data() + b * (N + 1) * D;
      for (std::int64_t e = 0; e < D; ++e) dst[e] += o[static_cast<std::size_t>(e)] / static_cast<double>(nb);
      for (std::int64_t t = 0; t < M; ++t)
        for (std::int64_t e = 0; e < D; ++e)
          dst[(1 + blk * M + t) * D + e] = o[static_cast<std::size_t>((1 + t) * D + e)];
    }
  }
  Vec out(pre.size());
  for (std::int64_t r = 0; r < B * (N + 1); ++r)
    for (std::int64_t j = 0; j < D; ++j) {
      double acc = bout[static_cast<std::size_t>(j)];
      for (std::int64_t i = 0; i < D; ++i) acc += pre[static_cast<std::size_t>(r * D + i)] * wout[static_cast<std::size_t>(i * D + j)];
      out[static_cast<std::size_t>(r * D + j)] = acc;
    }
  return out;
}

Vec iffn(const Vec& x, std::int64_t B, std::int64_t rows, std::int64_t cols, std::int64_t D, const Vec& w_row,
         const Vec& b_row, const Vec& w_col, const Vec& b_col, std::int64_t k, const Vec& gamma, const Vec& beta,
         const Vec& mean, const Vec& var, bool train) {
  const std::int64_t N = rows * cols;
  // Patch tokens to channel planes [B, D, rows, cols].
  Vec img(static_cast<std::size_t>(B * D * N));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < N; ++t)
      for (std::int64_t d = 0; d < D; ++d)
        img[static_cast<std::size_t>((b * D + d) * N + t)] = x[static_cast<std::size_t>((b * (N + 1) + 1 + t) * D + d)];
  const Dims4 xd{B, D, rows, cols};
  const Vec a = conv2d(img, xd, w_row, {D, 1, k, 1}, b_row, 1, 1, (k - 1) / 2, 0, D, nullptr);
  const Vec c = conv2d(a, xd, w_col, {D, 1, 1, k}, b_col, 1, 1, 0, (k - 1) / 2, D, nullptr);
  Vec out(static_cast<std::size_t>(B * N * D));
  for (std::int64_t d = 0; d < D; ++d) {
    double mu = mean[static_cast<std::size_t>(d)], va = var[static_cast<std::size_t>(d)];
    if (train) {
      double s = 0, ss = 0;
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < N; ++t) s += c[static_cast<std::size_t>((b * D + d) * N + t)];
      mu = s / static_cast<double>(B * N);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < N; ++t) {
          const double dv = c[static_cast<std::size_t>((b * D + d) * N + t)] - mu;
          ss += dv * dv;
        }
      va = ss / static_cast<double>(B * N);
    }
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t < N; ++t) {
        const double h = (c[static_cast<std::size_t>((b * D + d) * N + t)] - mu) / std::sqrt(va + 1e-5);
        out[static_cast<std::size_t>((b * N + t) * D + d)] =
            gelu(gamma[static_cast<std::size_t>(d)] * h + beta[static_cast<std::size_t>(d)]);
      }
  }
  return out;
}

Vec bilinear(const Vec& plane, std::int64_t h, std::int64_t w, std::int64_t oh, std::int64_t ow) {
  Vec out(static_cast<std::size_t>(oh * ow));
  auto coord = [](std::int64_t o, std::int64_t in, std::int64_t out_n) {
    return std::clamp((o + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5, 0.0,
                      static_cast<double>(in - 1));
  };
  for (std::int64_t i = 0; i < oh; ++i)
    for (std::int64_t j = 0; j < ow; ++j) {
      const double y = coord(i, h, oh), x = coord(j, w, ow);
      const auto y0 = static_cast<std::int64_t>(std::floor(y)), x0 = static_cast<std::int64_t>(std::floor(x));
      const auto y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
      auto at = [&](std::int64_t r, std::int64_t c) { return plane[static_cast<std::size_t>(r * w + c)]; };
      out[static_cast<std::size_t>(i * ow + j)] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                                                  fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    }
  return out;
}

}  // namespace ecvit::oracle
