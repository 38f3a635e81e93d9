#include "ecvit/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "ecvit/parallel.hpp"

namespace ecvit {

namespace {

using Index = std::int64_t;

std::vector<Index> contiguous_strides(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (Index i = static_cast<Index>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];
  }
  return s;
}

template <typename T>
Tensor<T> make(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

// C (+)= op(A) * op(B), all row-major. op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, const T* a, const T* b, T* c,
          bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> cm(c, m, n);
  const Eigen::Map<const Mat> am(a, trans_a ? k : m, trans_a ? m : k);
  const Eigen::Map<const Mat> bm(b, trans_b ? n : k, trans_b ? k : n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      cm.noalias() += lhs * rhs;
    } else {
      cm.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) run(am, bm);
  else if (trans_a && !trans_b) run(am.transpose(), bm);
  else if (!trans_a && trans_b) run(am, bm.transpose());
  else run(am.transpose(), bm.transpose());
}

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  Shape out;
  std::vector<Index> stride_a;
  std::vector<Index> stride_b;
};

std::vector<Index> aligned_strides(const Shape& in, const Shape& out) {
  const auto in_strides = contiguous_strides(in);
  std::vector<Index> s(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    s[offset + i] = in[i] == 1 ? 0 : in_strides[i];
  }
  return s;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const Index db = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return {out, aligned_strides(a, out), aligned_strides(b, out)};
}

// Calls f(i, offset_a, offset_b) for every flat output index i.
template <typename F>
void broadcast_loop(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const Index n = shape_numel(p.out);
  std::vector<Index> idx(r, 0);
  Index oa = 0, ob = 0;
  for (Index i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (Index ax = static_cast<Index>(r) - 1; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      if (++idx[u] < p.out[u]) {
        oa += p.stride_a[u];
        ob += p.stride_b[u];
        break;
      }
      oa -= p.stride_a[u] * (p.out[u] - 1);
      ob -= p.stride_b[u] * (p.out[u] - 1);
      idx[u] = 0;
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name) {
  const auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinaryKind::kAdd: return x + y;
      case BinaryKind::kSub: return x - y;
      default: return x * y;
    }
  };
  const bool same = a.shape() == b.shape();
  BroadcastPlan plan;
  if (same) {
    plan.out = a.shape();
  } else {
    plan = plan_broadcast(a.shape(), b.shape(), name);
  }
  std::vector<T> out(static_cast<std::size_t>(shape_numel(plan.out)));
  const T* pa = a.data();
  const T* pb = b.data();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(pa[i], pb[i]);
  } else {
    broadcast_loop(plan, [&](Index i, Index oa, Index ob) {
      out[static_cast<std::size_t>(i)] = apply(pa[oa], pb[ob]);
    });
  }
  auto sa = kind == BinaryKind::kMul ? a.storage() : nullptr;
  auto sb = kind == BinaryKind::kMul ? b.storage() : nullptr;
  return record_op<T>(name, make<T>(plan.out, std::move(out)), {a, b},
                      [plan, same, kind, sa, sb](std::span<const T> g, std::span<const std::span<T>> gi) {
                        auto& ga = gi[0];
                        auto& gb = gi[1];
                        const T sign_b = kind == BinaryKind::kSub ? T(-1) : T(1);
                        if (same) {
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (kind == BinaryKind::kMul) {
                              if (!ga.empty()) ga[i] += g[i] * (*sb)[i];
                              if (!gb.empty()) gb[i] += g[i] * (*sa)[i];
                            } else {
                              if (!ga.empty()) ga[i] += g[i];
                              if (!gb.empty()) gb[i] += sign_b * g[i];
                            }
                          }
                          return;
                        }
                        broadcast_loop(plan, [&](Index i, Index oa, Index ob) {
                          const T gv = g[static_cast<std::size_t>(i)];
                          if (kind == BinaryKind::kMul) {
                            if (!ga.empty()) ga[static_cast<std::size_t>(oa)] += gv * (*sb)[static_cast<std::size_t>(ob)];
                            if (!gb.empty()) gb[static_cast<std::size_t>(ob)] += gv * (*sa)[static_cast<std::size_t>(oa)];
                          } else {
                            if (!ga.empty()) ga[static_cast<std::size_t>(oa)] += gv;
                            if (!gb.empty()) gb[static_cast<std::size_t>(ob)] += sign_b * gv;
                          }
                        });
                      });
}

// Copies src (shape `in`) into dst laid out as the permutation `perm` of it.
template <typename T>
void permute_copy(const T* src, const Shape& in, const std::vector<Index>& perm, T* dst,
                  bool accumulate) {
  const auto in_strides = contiguous_strides(in);
  Shape out(perm.size());
  std::vector<Index> step(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out[i] = in[static_cast<std::size_t>(perm[i])];
    step[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  const std::size_t r = out.size();
  const Index inner = out[r - 1];
  const Index inner_step = step[r - 1];
  const Index outer = shape_numel(out) / inner;
  std::vector<Index> idx(r, 0);
  Index src_off = 0;
  T* d = dst;
  for (Index o = 0; o < outer; ++o) {
    const T* s = src + src_off;
    if (accumulate) {
      for (Index j = 0; j < inner; ++j) d[j] += s[j * inner_step];
    } else {
      for (Index j = 0; j < inner; ++j) d[j] = s[j * inner_step];
    }
    d += inner;
    for (Index ax = static_cast<Index>(r) - 2; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      if (++idx[u] < out[u]) {
        src_off += step[u];
        break;
      }
      src_off -= step[u] * (out[u] - 1);
      idx[u] = 0;
    }
  }
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  Index outer, length, inner;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, Index axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (static_cast<Index>(i) != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

template <typename T>
T standard_normal_cdf(T x) {
  return T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  return record_op<T>("scale", make<T>(a.shape(), std::move(out)), {a},
                      [factor](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += factor * g[i];
                      });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  Index known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known <= 0 || x.numel() % known != 0) {
      throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return record_op<T>("reshape", Tensor<T>(std::move(shape), x.storage()), {x},
                      [](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                      });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::int64_t>& dims) {
  const auto r = x.rank();
  if (static_cast<Index>(dims.size()) != r) {
    throw ShapeError("permute: " + std::to_string(dims.size()) + " axes given for shape " +
                     shape_str(x.shape()));
  }
  std::vector<Index> perm(dims.size());
  std::vector<bool> used(dims.size(), false);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    perm[i] = x.normalize_axis(dims[i]);
    if (used[static_cast<std::size_t>(perm[i])]) throw ShapeError("permute: repeated axis");
    used[static_cast<std::size_t>(perm[i])] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  permute_copy(x.data(), x.shape(), perm, out.data(), false);
  std::vector<Index> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[static_cast<std::size_t>(perm[i])] = static_cast<Index>(i);
  return record_op<T>("permute", make<T>(out_shape, std::move(out)), {x},
                      [out_shape, inverse](std::span<const T> g, std::span<const std::span<T>> gi) {
                        permute_copy(g.data(), out_shape, inverse, gi[0].data(), true);
                      });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::int64_t a, std::int64_t b) {
  std::vector<Index> perm(static_cast<std::size_t>(x.rank()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::swap(perm[static_cast<std::size_t>(x.normalize_axis(a))],
            perm[static_cast<std::size_t>(x.normalize_axis(b))]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::int64_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Index ax = parts[0].normalize_axis(axis);
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == parts[0].rank();
    for (Index i = 0; ok && i < p.rank(); ++i) {
      if (i != ax && p.dim(i) != parts[0].dim(i)) ok = false;
    }
    if (!ok) {
      throw ShapeError("concat: " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()) + " along axis " + std::to_string(ax));
    }
    out_shape[static_cast<std::size_t>(ax)] += p.dim(ax);
  }
  const auto split = split_axis(out_shape, ax);
  std::vector<Index> chunk(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) chunk[i] = parts[i].dim(ax) * split.inner;
  const Index row = split.length * split.inner;
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  Index col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const T* src = parts[i].data();
    for (Index o = 0; o < split.outer; ++o) {
      std::copy_n(src + o * chunk[i], chunk[i], out.data() + o * row + col);
    }
    col += chunk[i];
  }
  return record_op<T>("concat", make<T>(out_shape, std::move(out)), parts,
                      [chunk, row, outer = split.outer](std::span<const T> g,
                                                        std::span<const std::span<T>> gi) {
                        Index c = 0;
                        for (std::size_t i = 0; i < chunk.size(); ++i) {
                          if (!gi[i].empty()) {
                            for (Index o = 0; o < outer; ++o) {
                              const T* src = g.data() + o * row + c;
                              T* dst = gi[i].data() + o * chunk[i];
                              for (Index j = 0; j < chunk[i]; ++j) dst[j] += src[j];
                            }
                          }
                          c += chunk[i];
                        }
                      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  const Index ax = x.normalize_axis(axis);
  if (start < 0 || length <= 0 || start + length > x.dim(ax)) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  const auto split = split_axis(x.shape(), ax);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  const Index in_row = split.length * split.inner;
  const Index out_row = length * split.inner;
  const Index first = start * split.inner;
  std::vector<T> out(static_cast<std::size_t>(split.outer * out_row));
  for (Index o = 0; o < split.outer; ++o) {
    std::copy_n(x.data() + o * in_row + first, out_row, out.data() + o * out_row);
  }
  return record_op<T>("slice", make<T>(out_shape, std::move(out)), {x},
                      [in_row, out_row, first, outer = split.outer](std::span<const T> g,
                                                                    std::span<const std::span<T>> gi) {
                        for (Index o = 0; o < outer; ++o) {
                          T* dst = gi[0].data() + o * in_row + first;
                          const T* src = g.data() + o * out_row;
                          for (Index j = 0; j < out_row; ++j) dst[j] += src[j];
                        }
                      });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::int64_t axis,
                             const std::vector<std::int64_t>& sizes) {
  const Index ax = x.normalize_axis(axis);
  const Index total = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  if (total != x.dim(ax)) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " +
                     std::to_string(ax) + " of " + shape_str(x.shape()) + " has " +
                     std::to_string(x.dim(ax)));
  }
  std::vector<Tensor<T>> out;
  Index start = 0;
  for (auto s : sizes) {
    out.push_back(slice(x, ax, start, s));
    start += s;
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
  BroadcastPlan plan = plan_broadcast(x.shape(), shape, "broadcast_to");
  if (plan.out != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(static_cast<std::size_t>(shape_numel(shape)));
  const T* px = x.data();
  broadcast_loop(plan, [&](Index i, Index oa, Index) { out[static_cast<std::size_t>(i)] = px[oa]; });
  return record_op<T>("broadcast_to", make<T>(shape, std::move(out)), {x},
                      [plan](std::span<const T> g, std::span<const std::span<T>> gi) {
                        broadcast_loop(plan, [&](Index i, Index oa, Index) {
                          gi[0][static_cast<std::size_t>(oa)] += g[static_cast<std::size_t>(i)];
                        });
                      });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  return record_op<T>("sum", Tensor<T>(Shape{1}, acc), {x},
                      [](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (auto& v : gi[0]) v += g[0];
                      });
}

namespace {

template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, std::int64_t axis, bool average) {
  const Index ax = x.normalize_axis(axis);
  const auto s = split_axis(x.shape(), ax);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const T* px = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    T* dst = out.data() + o * s.inner;
    for (Index l = 0; l < s.length; ++l) {
      const T* src = px + (o * s.length + l) * s.inner;
      for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  const T factor = average ? T(1) / static_cast<T>(s.length) : T(1);
  if (average) {
    for (auto& v : out) v /= static_cast<T>(s.length);
  }
  return record_op<T>(average ? "mean" : "sum", make<T>(drop_axis(x.shape(), ax), std::move(out)),
                      {x}, [s, factor](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (Index o = 0; o < s.outer; ++o) {
                          const T* src = g.data() + o * s.inner;
                          for (Index l = 0; l < s.length; ++l) {
                            T* dst = gi[0].data() + (o * s.length + l) * s.inner;
                            for (Index i = 0; i < s.inner; ++i) dst[i] += factor * src[i];
                          }
                        }
                      });
}

}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::int64_t axis) {
  return reduce_axis(x, axis, false);
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::int64_t axis) {
  return reduce_axis(x, axis, true);
}

// ---------------------------------------------------------------------------
// Contractions

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not contract");
  }
  const Index m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  BroadcastPlan plan;
  try {
    plan = plan_broadcast(batch_a.empty() ? Shape{1} : batch_a, batch_b.empty() ? Shape{1} : batch_b,
                          "matmul");
  } catch (const ShapeError&) {
    throw ShapeError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast");
  }
  const Index batches = shape_numel(plan.out);
  std::vector<Index> off_a(static_cast<std::size_t>(batches)), off_b(static_cast<std::size_t>(batches));
  broadcast_loop(plan, [&](Index i, Index oa, Index ob) {
    off_a[static_cast<std::size_t>(i)] = oa * m * k;
    off_b[static_cast<std::size_t>(i)] = ob * k * n;
  });
  Shape out_shape = (batch_a.empty() && batch_b.empty()) ? Shape{} : plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batches * m * n));
  const T* pa = a.data();
  const T* pb = b.data();
  parallel_for(batches, [&](Index lo, Index hi) {
    for (Index i = lo; i < hi; ++i) {
      gemm<T>(false, false, m, n, k, pa + off_a[static_cast<std::size_t>(i)],
              pb + off_b[static_cast<std::size_t>(i)], out.data() + i * m * n, false);
    }
  });
  const bool a_broadcast = shape_numel(batch_a.empty() ? Shape{1} : batch_a) != batches;
  const bool b_broadcast = shape_numel(batch_b.empty() ? Shape{1} : batch_b) != batches;
  auto sa = a.storage();
  auto sb = b.storage();
  return record_op<T>(
      "matmul", make<T>(out_shape, std::move(out)), {a, b},
      [=](std::span<const T> g, std::span<const std::span<T>> gi) {
        auto grad_a = [&](Index lo, Index hi) {
          for (Index i = lo; i < hi; ++i) {
            gemm<T>(false, true, m, k, n, g.data() + i * m * n, sb->data() + off_b[static_cast<std::size_t>(i)],
                    gi[0].data() + off_a[static_cast<std::size_t>(i)], true);
          }
        };
        auto grad_b = [&](Index lo, Index hi) {
          for (Index i = lo; i < hi; ++i) {
            gemm<T>(true, false, k, n, m, sa->data() + off_a[static_cast<std::size_t>(i)], g.data() + i * m * n,
                    gi[1].data() + off_b[static_cast<std::size_t>(i)], true);
          }
        };
        if (!gi[0].empty()) {
          if (a_broadcast) grad_a(0, batches);
          else parallel_for(batches, grad_a);
        }
        if (!gi[1].empty()) {
          if (b_broadcast) grad_b(0, batches);
          else parallel_for(batches, grad_b);
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const Index in = weight.dim(0), out_dim = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  std::vector<T> out(static_cast<std::size_t>(rows * out_dim));
  if (bias.defined()) {
    for (Index r = 0; r < rows; ++r) std::copy_n(bias.data(), out_dim, out.data() + r * out_dim);
  }
  gemm<T>(false, false, rows, out_dim, in, x.data(), weight.data(), out.data(), bias.defined());
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto sx = x.storage();
  auto sw = weight.storage();
  return record_op<T>("linear", make<T>(out_shape, std::move(out)), inputs,
                      [=](std::span<const T> g, std::span<const std::span<T>> gi) {
                        if (!gi[0].empty()) gemm<T>(false, true, rows, in, out_dim, g.data(), sw->data(), gi[0].data(), true);
                        if (!gi[1].empty()) gemm<T>(true, false, in, out_dim, rows, sx->data(), g.data(), gi[1].data(), true);
                        if (gi.size() > 2 && !gi[2].empty()) {
                          for (Index r = 0; r < rows; ++r) {
                            const T* src = g.data() + r * out_dim;
                            for (Index j = 0; j < out_dim; ++j) gi[2][static_cast<std::size_t>(j)] += src[j];
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kh, kw;
  Index out_h, out_w;
  Index groups, in_per_group, out_per_group;
  Hw stride, pad;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  // cols[(c * kh + i) * kw + j][oh * out_w + ow], c local to the group
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.in_per_group; ++c) {
    const T* xc = x + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        T* dst = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride.h - g.pad.h + i;
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill_n(row, g.out_w, T(0));
            continue;
          }
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride.w - g.pad.w + j;
            row[ow] = (iw < 0 || iw >= g.width) ? T(0) : xc[ih * g.width + iw];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* x) {
  const Index plane = g.out_h * g.out_w;
  for (Index c = 0; c < g.in_per_group; ++c) {
    T* xc = x + c * g.height * g.width;
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const T* src = cols + ((c * g.kh + i) * g.kw + j) * plane;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride.h - g.pad.h + i;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride.w - g.pad.w + j;
            if (iw >= 0 && iw < g.width) xc[ih * g.width + iw] += src[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
inline void tap_range(Index out, Index in, Index stride, Index pad, Index tap, Index& lo, Index& hi) {
  // need 0 <= o * stride - pad + tap < in
  lo = 0;
  const Index first = pad - tap;
  if (first > 0) lo = (first + stride - 1) / stride;
  const Index last = in - 1 + pad - tap;  // o * stride <= last
  hi = last < 0 ? 0 : std::min(out, last / stride + 1);
  if (hi < lo) hi = lo;
}

template <typename T>
void depthwise_forward(const T* x, const T* w, const T* bias, const ConvGeometry& g, T* y) {
  const Index mult = g.out_per_group;
  const Index plane_in = g.height * g.width;
  const Index plane_out = g.out_h * g.out_w;
  parallel_for(g.batch * g.out_channels, [&](Index lo_idx, Index hi_idx) {
    for (Index idx = lo_idx; idx < hi_idx; ++idx) {
      const Index b = idx / g.out_channels;
      const Index co = idx % g.out_channels;
      const T* xp = x + (b * g.channels + co / mult) * plane_in;
      T* yp = y + idx * plane_out;
      std::fill_n(yp, plane_out, bias ? bias[co] : T(0));
      for (Index i = 0; i < g.kh; ++i) {
        Index oh_lo, oh_hi;
        tap_range(g.out_h, g.height, g.stride.h, g.pad.h, i, oh_lo, oh_hi);
        for (Index j = 0; j < g.kw; ++j) {
          Index ow_lo, ow_hi;
          tap_range(g.out_w, g.width, g.stride.w, g.pad.w, j, ow_lo, ow_hi);
          const T wv = w[(co * g.kh + i) * g.kw + j];
          for (Index oh = oh_lo; oh < oh_hi; ++oh) {
            const T* xr = xp + (oh * g.stride.h - g.pad.h + i) * g.width - g.pad.w + j;
            T* yr = yp + oh * g.out_w;
            for (Index ow = ow_lo; ow < ow_hi; ++ow) yr[ow] += wv * xr[ow * g.stride.w];
          }
        }
      }
    }
  });
}

template <typename T>
void depthwise_backward(const T* x, const T* w, const T* gy, const ConvGeometry& g, T* gx, T* gw,
                        T* gb) {
  const Index mult = g.out_per_group;
  const Index plane_in = g.height * g.width;
  const Index plane_out = g.out_h * g.out_w;
  for (Index b = 0; b < g.batch; ++b) {
    for (Index co = 0; co < g.out_channels; ++co) {
      const Index in_off = (b * g.channels + co / mult) * plane_in;
      const T* xp = x + in_off;
      const T* gp = gy + (b * g.out_channels + co) * plane_out;
      if (gb) {
        T acc = 0;
        for (Index p = 0; p < plane_out; ++p) acc += gp[p];
        gb[co] += acc;
      }
      for (Index i = 0; i < g.kh; ++i) {
        Index oh_lo, oh_hi;
        tap_range(g.out_h, g.height, g.stride.h, g.pad.h, i, oh_lo, oh_hi);
        for (Index j = 0; j < g.kw; ++j) {
          Index ow_lo, ow_hi;
          tap_range(g.out_w, g.width, g.stride.w, g.pad.w, j, ow_lo, ow_hi);
          const Index widx = (co * g.kh + i) * g.kw + j;
          const T wv = w[widx];
          T acc = 0;
          for (Index oh = oh_lo; oh < oh_hi; ++oh) {
            const Index base = (oh * g.stride.h - g.pad.h + i) * g.width - g.pad.w + j;
            const T* gr = gp + oh * g.out_w;
            for (Index ow = ow_lo; ow < ow_hi; ++ow) {
              const Index xi = base + ow * g.stride.w;
              acc += gr[ow] * xp[xi];
              if (gx) gx[in_off + xi] += gr[ow] * wv;
            }
          }
          if (gw) gw[widx] += acc;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const Conv2dOptions& opts) {
  if (x.rank() != 4 || weight.rank() != 4) {
    throw ShapeError("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(weight.shape()));
  }
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_channels = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.groups = opts.groups;
  g.stride = opts.stride;
  g.pad = opts.pad;
  if (g.groups < 1 || g.channels % g.groups != 0 || g.out_channels % g.groups != 0) {
    throw ConfigError("conv2d: channels " + std::to_string(g.channels) + " -> " +
                      std::to_string(g.out_channels) + " not divisible by groups " +
                      std::to_string(g.groups));
  }
  g.in_per_group = g.channels / g.groups;
  g.out_per_group = g.out_channels / g.groups;
  if (weight.dim(1) != g.in_per_group) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with groups " + std::to_string(g.groups));
  }
  if (g.stride.h < 1 || g.stride.w < 1 || g.pad.h < 0 || g.pad.w < 0) {
    throw ConfigError("conv2d: strides must be positive and padding non-negative");
  }
  if (g.height + 2 * g.pad.h < g.kh || g.width + 2 * g.pad.w < g.kw) {
    throw ConfigError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                      " larger than padded input " + shape_str(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(g.out_channels) + " output channels");
  }
  g.out_h = (g.height + 2 * g.pad.h - g.kh) / g.stride.h + 1;
  g.out_w = (g.width + 2 * g.pad.w - g.kw) / g.stride.w + 1;

  const Index plane_out = g.out_h * g.out_w;
  const Index plane_in = g.height * g.width;
  const Index patch = g.in_per_group * g.kh * g.kw;
  const bool depthwise = g.in_per_group == 1 && g.groups == g.channels;
  const bool pointwise = g.kh == 1 && g.kw == 1 && g.stride == Hw{1, 1} && g.pad == Hw{0, 0};

  std::vector<T> out(static_cast<std::size_t>(g.batch * g.out_channels * plane_out));
  if (depthwise) {
    depthwise_forward(x.data(), weight.data(), bias.defined() ? bias.data() : nullptr, g, out.data());
  } else {
    parallel_for(g.batch, [&](Index lo, Index hi) {
      std::vector<T> cols(pointwise ? 0 : static_cast<std::size_t>(patch * plane_out));
      for (Index b = lo; b < hi; ++b) {
        for (Index gr = 0; gr < g.groups; ++gr) {
          const T* xin = x.data() + (b * g.channels + gr * g.in_per_group) * plane_in;
          const T* src = xin;
          if (!pointwise) {
            im2col(xin, g, cols.data());
            src = cols.data();
          }
          T* dst = out.data() + (b * g.out_channels + gr * g.out_per_group) * plane_out;
          if (bias.defined()) {
            for (Index c = 0; c < g.out_per_group; ++c) {
              std::fill_n(dst + c * plane_out, plane_out, bias.data()[gr * g.out_per_group + c]);
            }
          }
          gemm<T>(false, false, g.out_per_group, plane_out, patch,
                  weight.data() + gr * g.out_per_group * patch, src, dst, bias.defined());
        }
      }
    });
  }

  std::vector<Tensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  auto sx = x.storage();
  auto sw = weight.storage();
  return record_op<T>(
      "conv2d", make<T>(Shape{g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out)), inputs,
      [=](std::span<const T> gy, std::span<const std::span<T>> gi) {
        T* gx = gi[0].empty() ? nullptr : gi[0].data();
        T* gw = gi[1].empty() ? nullptr : gi[1].data();
        T* gb = (gi.size() > 2 && !gi[2].empty()) ? gi[2].data() : nullptr;
        if (depthwise) {
          depthwise_backward(sx->data(), sw->data(), gy.data(), g, gx, gw, gb);
          return;
        }
        if (gb) {
          for (Index b = 0; b < g.batch; ++b) {
            for (Index c = 0; c < g.out_channels; ++c) {
              const T* p = gy.data() + (b * g.out_channels + c) * plane_out;
              T acc = 0;
              for (Index i = 0; i < plane_out; ++i) acc += p[i];
              gb[c] += acc;
            }
          }
        }
        std::vector<T> cols(static_cast<std::size_t>(patch * plane_out));
        std::vector<T> dcols(gx && !pointwise ? cols.size() : 0);
        for (Index b = 0; b < g.batch; ++b) {
          for (Index gr = 0; gr < g.groups; ++gr) {
            const Index in_off = (b * g.channels + gr * g.in_per_group) * plane_in;
            const T* gout = gy.data() + (b * g.out_channels + gr * g.out_per_group) * plane_out;
            const T* wg = sw->data() + gr * g.out_per_group * patch;
            const T* src = sx->data() + in_off;
            if (!pointwise) {
              im2col(src, g, cols.data());
              src = cols.data();
            }
            if (gw) gemm<T>(false, true, g.out_per_group, patch, plane_out, gout, src, gw + gr * g.out_per_group * patch, true);
            if (gx) {
              if (pointwise) {
                gemm<T>(true, false, patch, plane_out, g.out_per_group, wg, gout, gx + in_off, true);
              } else {
                gemm<T>(true, false, patch, plane_out, g.out_per_group, wg, gout, dcols.data(), false);
                col2im_add(dcols.data(), g, gx + in_off);
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const Pool2dOptions& opts) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: expected 4-D input, got " + shape_str(x.shape()));
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto [kh, kw] = opts.kernel;
  const auto [sh, sw] = opts.stride;
  const auto [ph, pw] = opts.pad;
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1 || ph < 0 || pw < 0) {
    throw ConfigError("maxpool2d: kernel and stride must be positive, padding non-negative");
  }
  if (H + 2 * ph < kh || W + 2 * pw < kw) {
    throw ConfigError("maxpool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " larger than padded input " + shape_str(x.shape()));
  }
  if (2 * ph > kh || 2 * pw > kw) {
    throw ConfigError("maxpool2d: padding exceeds half the window");
  }
  const Index Ho = (H + 2 * ph - kh) / sh + 1;
  const Index Wo = (W + 2 * pw - kw) / sw + 1;
  std::vector<T> out(static_cast<std::size_t>(B * C * Ho * Wo));
  auto arg = std::make_shared<std::vector<std::int32_t>>(out.size());
  const T* px = x.data();
  for (Index p = 0; p < B * C; ++p) {
    const T* plane = px + p * H * W;
    for (Index oh = 0; oh < Ho; ++oh) {
      for (Index ow = 0; ow < Wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t best_idx = -1;
        for (Index i = 0; i < kh; ++i) {
          const Index ih = oh * sh - ph + i;
          if (ih < 0 || ih >= H) continue;
          for (Index j = 0; j < kw; ++j) {
            const Index iw = ow * sw - pw + j;
            if (iw < 0 || iw >= W) continue;
            const T v = plane[ih * W + iw];
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = static_cast<std::int32_t>(ih * W + iw);
            }
          }
        }
        const auto o = static_cast<std::size_t>((p * Ho + oh) * Wo + ow);
        out[o] = best;
        (*arg)[o] = best_idx;
      }
    }
  }
  const Index plane_in = H * W, plane_out = Ho * Wo;
  return record_op<T>("maxpool2d", make<T>(Shape{B, C, Ho, Wo}, std::move(out)), {x},
                      [arg, plane_in, plane_out](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t o = 0; o < g.size(); ++o) {
                          const Index p = static_cast<Index>(o) / plane_out;
                          gi[0][static_cast<std::size_t>(p * plane_in + (*arg)[o])] += g[o];
                        }
                      });
}

template <typename T>
Tensor<T> maxpool1d_seq(const Tensor<T>& x, std::int64_t kernel, std::int64_t stride) {
  if (x.rank() != 3) throw ShapeError("maxpool1d_seq: expected [B, N, D], got " + shape_str(x.shape()));
  if (kernel < 1 || kernel != stride) {
    throw ConfigError("maxpool1d_seq: kernel " + std::to_string(kernel) + " must equal stride " +
                      std::to_string(stride));
  }
  const Index B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (N % kernel != 0) {
    throw DivisibilityError("maxpool1d_seq: token count " + std::to_string(N) +
                            " not divisible by " + std::to_string(kernel));
  }
  const Index No = N / kernel;
  std::vector<T> out(static_cast<std::size_t>(B * No * D));
  auto arg = std::make_shared<std::vector<std::int32_t>>(out.size());
  const T* px = x.data();
  for (Index b = 0; b < B; ++b) {
    for (Index t = 0; t < No; ++t) {
      for (Index d = 0; d < D; ++d) {
        Index best = t * kernel;
        T bv = px[(b * N + best) * D + d];
        for (Index j = 1; j < kernel; ++j) {
          const T v = px[(b * N + t * kernel + j) * D + d];
          if (v > bv) {
            bv = v;
            best = t * kernel + j;
          }
        }
        const auto o = static_cast<std::size_t>((b * No + t) * D + d);
        out[o] = bv;
        (*arg)[o] = static_cast<std::int32_t>((b * N + best) * D + d);
      }
    }
  }
  return record_op<T>("maxpool1d_seq", make<T>(Shape{B, No, D}, std::move(out)), {x},
                      [arg](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t o = 0; o < g.size(); ++o) gi[0][static_cast<std::size_t>((*arg)[o])] += g[o];
                      });
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] * standard_normal_cdf(px[i]);
  auto sx = x.storage();
  return record_op<T>("gelu", make<T>(x.shape(), std::move(out)), {x},
                      [sx](std::span<const T> g, std::span<const std::span<T>> gi) {
                        const T inv_sqrt_2pi = T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const T v = (*sx)[i];
                          const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
                          gi[0][i] += g[i] * (standard_normal_cdf(v) + v * pdf);
                        }
                      });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
  auto sx = x.storage();
  return record_op<T>("relu", make<T>(x.shape(), std::move(out)), {x},
                      [sx](std::span<const T> g, std::span<const std::span<T>> gi) {
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if ((*sx)[i] > T(0)) gi[0][i] += g[i];
                        }
                      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  const Index ax = x.normalize_axis(axis);
  const auto s = split_axis(x.shape(), ax);
  auto y = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  const T* px = x.data();
  T* py = y->data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      T mx = px[base];
      for (Index l = 1; l < s.length; ++l) mx = std::max(mx, px[base + l * s.inner]);
      T total = 0;
      for (Index l = 0; l < s.length; ++l) {
        const T e = std::exp(px[base + l * s.inner] - mx);
        py[base + l * s.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (Index l = 0; l < s.length; ++l) py[base + l * s.inner] *= inv;
    }
  }
  return record_op<T>("softmax", Tensor<T>(x.shape(), y), {x},
                      [y, s](std::span<const T> g, std::span<const std::span<T>> gi) {
                        const T* yv = y->data();
                        for (Index o = 0; o < s.outer; ++o) {
                          for (Index i = 0; i < s.inner; ++i) {
                            const Index base = o * s.length * s.inner + i;
                            T dot = 0;
                            for (Index l = 0; l < s.length; ++l) {
                              const Index k = base + l * s.inner;
                              dot += g[static_cast<std::size_t>(k)] * yv[k];
                            }
                            for (Index l = 0; l < s.length; ++l) {
                              const Index k = base + l * s.inner;
                              gi[0][static_cast<std::size_t>(k)] += yv[k] * (g[static_cast<std::size_t>(k)] - dot);
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, double momentum,
                    double eps) {
  if (x.rank() < 2) throw ShapeError("batchnorm: expected at least [B, C], got " + shape_str(x.shape()));
  const Index B = x.dim(0), C = x.dim(1);
  const Index inner = x.numel() / (B * C);
  for (const Tensor<T>* t : {&gamma, &beta, static_cast<const Tensor<T>*>(&running_mean), static_cast<const Tensor<T>*>(&running_var)}) {
    if (t->numel() != C) {
      throw ShapeError("batchnorm: parameter of shape " + shape_str(t->shape()) + " for " +
                       std::to_string(C) + " channels");
    }
  }
  const Index n = B * inner;
  const T* px = x.data();
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const bool train = mode == Mode::kTrain;
  for (Index c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0;
      for (Index b = 0; b < B; ++b) {
        const T* p = px + (b * C + c) * inner;
        for (Index i = 0; i < inner; ++i) s += p[i];
      }
      mu = s / static_cast<double>(n);
      double ss = 0;
      for (Index b = 0; b < B; ++b) {
        const T* p = px + (b * C + c) * inner;
        for (Index i = 0; i < inner; ++i) {
          const double d = p[i] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(n);
      const double unbiased = n > 1 ? ss / static_cast<double>(n - 1) : var;
      T& rm = running_mean.mutable_data()[c];
      T& rv = running_var.mutable_data()[c];
      rm = static_cast<T>((1.0 - momentum) * rm + momentum * mu);
      rv = static_cast<T>((1.0 - momentum) * rv + momentum * unbiased);
    } else {
      mu = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T m = static_cast<T>(mu);
    (*invstd)[static_cast<std::size_t>(c)] = is;
    const T gm = gamma.data()[c], bt = beta.data()[c];
    for (Index b = 0; b < B; ++b) {
      const Index off = (b * C + c) * inner;
      for (Index i = 0; i < inner; ++i) {
        const T h = (px[off + i] - m) * is;
        (*xhat)[static_cast<std::size_t>(off + i)] = h;
        out[static_cast<std::size_t>(off + i)] = gm * h + bt;
      }
    }
  }
  auto sg = gamma.storage();
  return record_op<T>(
      "batchnorm", make<T>(x.shape(), std::move(out)), {x, gamma, beta},
      [=](std::span<const T> g, std::span<const std::span<T>> gi) {
        for (Index c = 0; c < C; ++c) {
          T sum_g = 0, sum_gh = 0;
          for (Index b = 0; b < B; ++b) {
            const Index off = (b * C + c) * inner;
            for (Index i = 0; i < inner; ++i) {
              sum_g += g[static_cast<std::size_t>(off + i)];
              sum_gh += g[static_cast<std::size_t>(off + i)] * (*xhat)[static_cast<std::size_t>(off + i)];
            }
          }
          if (!gi[1].empty()) gi[1][static_cast<std::size_t>(c)] += sum_gh;
          if (!gi[2].empty()) gi[2][static_cast<std::size_t>(c)] += sum_g;
          if (gi[0].empty()) continue;
          const T gm = (*sg)[static_cast<std::size_t>(c)];
          const T is = (*invstd)[static_cast<std::size_t>(c)];
          const T mean_g = sum_g / static_cast<T>(n);
          const T mean_gh = sum_gh / static_cast<T>(n);
          for (Index b = 0; b < B; ++b) {
            const Index off = (b * C + c) * inner;
            for (Index i = 0; i < inner; ++i) {
              const auto k = static_cast<std::size_t>(off + i);
              gi[0][k] += train ? gm * is * (g[k] - mean_g - (*xhat)[k] * mean_gh) : gm * is * g[k];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const Index D = x.dim(-1);
  if (gamma.numel() != D || beta.numel() != D) {
    throw ShapeError("layernorm: parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " for input " + shape_str(x.shape()));
  }
  const Index rows = x.numel() / D;
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (Index r = 0; r < rows; ++r) {
    const T* row = px + r * D;
    double s = 0;
    for (Index d = 0; d < D; ++d) s += row[d];
    const double mu = s / static_cast<double>(D);
    double ss = 0;
    for (Index d = 0; d < D; ++d) ss += (row[d] - mu) * (row[d] - mu);
    const T is = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(D) + eps));
    const T m = static_cast<T>(mu);
    (*rstd)[static_cast<std::size_t>(r)] = is;
    for (Index d = 0; d < D; ++d) {
      const auto k = static_cast<std::size_t>(r * D + d);
      const T h = (row[d] - m) * is;
      (*xhat)[k] = h;
      out[k] = pg[d] * h + pb[d];
    }
  }
  auto sg = gamma.storage();
  return record_op<T>(
      "layernorm", make<T>(x.shape(), std::move(out)), {x, gamma, beta},
      [=](std::span<const T> g, std::span<const std::span<T>> gi) {
        for (Index r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dhh = 0;
          for (Index d = 0; d < D; ++d) {
            const auto k = static_cast<std::size_t>(r * D + d);
            if (!gi[1].empty()) gi[1][static_cast<std::size_t>(d)] += g[k] * (*xhat)[k];
            if (!gi[2].empty()) gi[2][static_cast<std::size_t>(d)] += g[k];
            const T dh = g[k] * (*sg)[static_cast<std::size_t>(d)];
            mean_dh += dh;
            mean_dhh += dh * (*xhat)[k];
          }
          if (gi[0].empty()) continue;
          mean_dh /= static_cast<T>(D);
          mean_dhh /= static_cast<T>(D);
          const T is = (*rstd)[static_cast<std::size_t>(r)];
          for (Index d = 0; d < D; ++d) {
            const auto k = static_cast<std::size_t>(r * D + d);
            const T dh = g[k] * (*sg)[static_cast<std::size_t>(d)];
            gi[0][k] += is * (dh - mean_dh - (*xhat)[k] * mean_dhh);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Loss and selection

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const Index B = logits.dim(0), C = logits.dim(1);
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(B * C));
  auto lab = std::make_shared<std::vector<std::int64_t>>(labels.begin(), labels.end());
  double total = 0;
  for (Index b = 0; b < B; ++b) {
    const Index y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= C) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(C) + ")");
    }
    const T* row = logits.data() + b * C;
    T mx = row[0];
    for (Index c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T s = 0;
    for (Index c = 0; c < C; ++c) {
      const T e = std::exp(row[c] - mx);
      (*probs)[static_cast<std::size_t>(b * C + c)] = e;
      s += e;
    }
    for (Index c = 0; c < C; ++c) (*probs)[static_cast<std::size_t>(b * C + c)] /= s;
    total += static_cast<double>(std::log(s) + mx - row[y]);
  }
  return record_op<T>("cross_entropy", Tensor<T>(Shape{1}, static_cast<T>(total / static_cast<double>(B))),
                      {logits}, [probs, lab, B, C](std::span<const T> g, std::span<const std::span<T>> gi) {
                        const T f = g[0] / static_cast<T>(B);
                        for (Index b = 0; b < B; ++b) {
                          for (Index c = 0; c < C; ++c) {
                            const auto k = static_cast<std::size_t>(b * C + c);
                            const T onehot = c == (*lab)[static_cast<std::size_t>(b)] ? T(1) : T(0);
                            gi[0][k] += f * ((*probs)[k] - onehot);
                          }
                        }
                      });
}

template <typename T>
std::vector<std::int64_t> argmax(const Tensor<T>& x, std::int64_t axis) {
  const auto s = split_axis(x.shape(), x.normalize_axis(axis));
  std::vector<std::int64_t> out(static_cast<std::size_t>(s.outer * s.inner));
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const T* base = x.data() + o * s.length * s.inner + i;
      Index best = 0;
      for (Index l = 1; l < s.length; ++l) {
        if (base[l * s.inner] > base[best * s.inner]) best = l;
      }
      out[static_cast<std::size_t>(o * s.inner + i)] = best;
    }
  }
  return out;
}

#define ECVIT_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::int64_t>&);                   \
  template Tensor<T> transpose(const Tensor<T>&, std::int64_t, std::int64_t);                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::int64_t);                           \
  template Tensor<T> slice(const Tensor<T>&, std::int64_t, std::int64_t, std::int64_t);             \
  template std::vector<Tensor<T>> split(const Tensor<T>&, std::int64_t,                             \
                                        const std::vector<std::int64_t>&);                          \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> sum(const Tensor<T>&, std::int64_t);                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&, std::int64_t);                                          \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                            const Conv2dOptions&);                                                  \
  template Tensor<T> maxpool2d(const Tensor<T>&, const Pool2dOptions&);                             \
  template Tensor<T> maxpool1d_seq(const Tensor<T>&, std::int64_t, std::int64_t);                   \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> softmax(const Tensor<T>&, std::int64_t);                                       \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,    \
                               Tensor<T>&, Mode, double, double);                                   \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);       \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int64_t>);                \
  template std::vector<std::int64_t> argmax(const Tensor<T>&, std::int64_t);

ECVIT_INSTANTIATE_OPS(float)
ECVIT_INSTANTIATE_OPS(double)

#undef ECVIT_INSTANTIATE_OPS

}  // namespace ecvit
