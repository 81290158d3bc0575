#include "transip/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace transip::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::size_t axis_index(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw std::out_of_range("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " do not broadcast");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

// Strides of `src` laid against `out` (right aligned); broadcast axes get 0.
std::vector<std::size_t> aligned_strides(const Shape& src, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < src.size(); ++k) {
    const std::size_t si = src.size() - 1 - k;
    const std::size_t oi = out.size() - 1 - k;
    strides[oi] = src[si] == 1 ? 0 : stride;
    stride *= src[si];
  }
  return strides;
}

// Visits `shape` one innermost row at a time, tracking offsets into two
// sources described by aligned strides.
template <class Fn>
void walk_rows(const Shape& shape, const std::vector<std::size_t>& sa,
               const std::vector<std::size_t>& sb, Fn fn) {
  const std::size_t total = shape_numel(shape);
  if (total == 0) return;
  if (shape.empty()) {
    fn(std::size_t{0}, std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0},
       std::size_t{0});
    return;
  }
  const std::size_t rank = shape.size();
  const std::size_t inner = shape[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t out = 0; out < total; out += inner) {
    fn(out, oa, ob, inner, sa[rank - 1], sb[rank - 1]);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
}

template <class F>
std::vector<double> binary_values(const Tensor& a, const Tensor& b, const Shape& out, F f) {
  std::vector<double> result(shape_numel(out));
  const auto va = a.values();
  const auto vb = b.values();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(va[i], vb[i]);
    return result;
  }
  if (vb.size() == 1 && va.size() == result.size()) {
    const double s = vb[0];
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(va[i], s);
    return result;
  }
  if (va.size() == 1 && vb.size() == result.size()) {
    const double s = va[0];
    for (std::size_t i = 0; i < result.size(); ++i) result[i] = f(s, vb[i]);
    return result;
  }
  const auto sa = aligned_strides(a.shape(), out);
  const auto sb = aligned_strides(b.shape(), out);
  walk_rows(out, sa, sb,
            [&](std::size_t o, std::size_t ia, std::size_t ib, std::size_t n, std::size_t da,
                std::size_t db) {
              for (std::size_t j = 0; j < n; ++j) result[o + j] = f(va[ia + j * da], vb[ib + j * db]);
            });
  return result;
}

Shape with_last(Shape s, std::size_t last) {
  s.back() = last;
  return s;
}

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

template <class F>
Tensor map_values(const Tensor& x, F f, std::string_view name, BackwardFn backward) {
  const auto v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = f(v[i]);
  return make_result(x.shape(), std::move(out), name, {x}, std::move(backward));
}

// Derivatives of GELU, chained so each level is differentiable by the next.
Tensor gelu_d3(const Tensor& x) {
  return map_values(
      x, [](double v) { return normal_pdf(v) * (v * v * v - 4.0 * v); }, "gelu_d3",
      [](const Tensor&, const std::vector<bool>&) -> std::vector<Tensor> {
        throw std::logic_error("GELU derivatives beyond third order are not supported");
      });
}

Tensor gelu_d2(const Tensor& x) {
  return map_values(
      x, [](double v) { return normal_pdf(v) * (2.0 - v * v); }, "gelu_d2",
      [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, gelu_d3(x))};
      });
}

Tensor gelu_d1(const Tensor& x) {
  return map_values(
      x, [](double v) { return normal_cdf(v) + v * normal_pdf(v); }, "gelu_d1",
      [x](const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, gelu_d2(x))};
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  auto values = binary_values(a, b, out, [](double x, double y) { return x + y; });
  return make_result(out, std::move(values), "add", {a, b},
                     [sa = a.shape(), sb = b.shape()](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = sum_to(g, sa);
                       if (need[1]) r[1] = sum_to(g, sb);
                       return r;
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  auto values = binary_values(a, b, out, [](double x, double y) { return x - y; });
  return make_result(out, std::move(values), "sub", {a, b},
                     [sa = a.shape(), sb = b.shape()](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = sum_to(g, sa);
                       if (need[1]) r[1] = sum_to(neg(g), sb);
                       return r;
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  auto values = binary_values(a, b, out, [](double x, double y) { return x * y; });
  return make_result(out, std::move(values), "mul", {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = sum_to(mul(g, b), a.shape());
                       if (need[1]) r[1] = sum_to(mul(g, a), b.shape());
                       return r;
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  auto values = binary_values(a, b, out, [](double x, double y) { return x / y; });
  return make_result(out, std::move(values), "div", {a, b},
                     [a, b](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) r[0] = sum_to(div(g, b), a.shape());
                       if (need[1]) r[1] = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape());
                       return r;
                     });
}

Tensor neg(const Tensor& x) {
  return map_values(x, [](double v) { return -v; }, "neg",
                    [](const Tensor& g, const std::vector<bool>&) {
                      return std::vector<Tensor>{neg(g)};
                    });
}

Tensor scale(const Tensor& x, double s) {
  return map_values(x, [s](double v) { return v * s; }, "scale",
                    [s](const Tensor& g, const std::vector<bool>&) {
                      return std::vector<Tensor>{scale(g, s)};
                    });
}

Tensor square(const Tensor& x) {
  return map_values(x, [](double v) { return v * v; }, "square",
                    [x](const Tensor& g, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, scale(x, 2.0))};
                    });
}

Tensor sqrt(const Tensor& x) {
  return map_values(x, [](double v) { return std::sqrt(v); }, "sqrt",
                    [x](const Tensor& g, const std::vector<bool>&) {
                      return std::vector<Tensor>{div(g, scale(sqrt(x), 2.0))};
                    });
}

Tensor abs(const Tensor& x) {
  return map_values(x, [](double v) { return std::abs(v); }, "abs",
                    [x](const Tensor& g, const std::vector<bool>&) {
                      const auto v = x.values();
                      std::vector<double> sign(v.size());
                      for (std::size_t i = 0; i < v.size(); ++i) {
                        sign[i] = v[i] > 0.0 ? 1.0 : (v[i] < 0.0 ? -1.0 : 0.0);
                      }
                      return std::vector<Tensor>{mul(g, Tensor(x.shape(), std::move(sign)))};
                    });
}

Tensor gelu(const Tensor& x) {
  return map_values(x, [](double v) { return v * normal_cdf(v); }, "gelu",
                    [x](const Tensor& g, const std::vector<bool>&) {
                      return std::vector<Tensor>{mul(g, gelu_d1(x))};
                    });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw std::invalid_argument("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  }
  if (b.rank() == 2 && a.rank() > 2) {
    if (transpose_a) throw std::invalid_argument("matmul: cannot transpose a batched lhs against a matrix");
    Shape lead(a.shape().begin(), a.shape().end() - 1);
    const std::size_t rows = shape_numel(lead);
    Tensor flat = matmul(reshape(a, {rows, a.dim(-1)}), b, false, transpose_b);
    lead.push_back(flat.dim(-1));
    return reshape(flat, lead);
  }
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
    throw std::invalid_argument("matmul batch axes differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
  const std::size_t m = transpose_a ? ac : ar;
  const std::size_t k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br;
  const std::size_t n = transpose_b ? br : bc;
  if (k != kb) {
    throw std::invalid_argument("matmul inner dimensions differ: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  Shape out(a.shape().begin(), a.shape().end() - 2);
  const std::size_t batch = shape_numel(out);
  out.push_back(m);
  out.push_back(n);
  std::vector<double> values(batch * m * n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMap A(pa + i * ar * ac, ar, ac);
    ConstMap B(pb + i * br * bc, br, bc);
    MutMap C(values.data() + i * m * n, m, n);
    if (!transpose_a && !transpose_b) {
      C.noalias() = A * B;
    } else if (transpose_a && !transpose_b) {
      C.noalias() = A.transpose() * B;
    } else if (!transpose_a && transpose_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A.transpose() * B.transpose();
    }
  }
  return make_result(
      std::move(out), std::move(values), "matmul", {a, b},
      [a, b, transpose_a, transpose_b](const Tensor& g, const std::vector<bool>& need) {
        std::vector<Tensor> r(2);
        if (!transpose_a && !transpose_b) {
          if (need[0]) r[0] = matmul(g, b, false, true);
          if (need[1]) r[1] = matmul(a, g, true, false);
        } else if (!transpose_a && transpose_b) {
          if (need[0]) r[0] = matmul(g, b, false, false);
          if (need[1]) r[1] = matmul(g, a, true, false);
        } else if (transpose_a && !transpose_b) {
          if (need[0]) r[0] = matmul(b, g, false, true);
          if (need[1]) r[1] = matmul(a, g, false, false);
        } else {
          if (need[0]) r[0] = matmul(b, g, true, true);
          if (need[1]) r[1] = matmul(g, a, true, true);
        }
        return r;
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  return make_view(x, std::move(shape), "reshape",
                   [in_shape = x.shape()](const Tensor& g, const std::vector<bool>&) {
                     return std::vector<Tensor>{reshape(g, in_shape)};
                   });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw std::invalid_argument("cannot broadcast " + shape_str(x.shape()) + " to " +
                                shape_str(shape));
  }
  if (x.shape() == shape) return x;
  std::vector<double> out(shape_numel(shape));
  const auto v = x.values();
  const auto sx = aligned_strides(x.shape(), shape);
  walk_rows(shape, sx, sx,
            [&](std::size_t o, std::size_t ix, std::size_t, std::size_t n, std::size_t dx, std::size_t) {
              for (std::size_t j = 0; j < n; ++j) out[o + j] = v[ix + j * dx];
            });
  return make_result(shape, std::move(out), "broadcast_to", {x},
                     [in_shape = x.shape()](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{sum_to(g, in_shape)};
                     });
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shapes(shape, x.shape()) != x.shape()) {
    throw std::invalid_argument("cannot sum " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(shape_numel(shape), 0.0);
  const auto v = x.values();
  const auto st = aligned_strides(shape, x.shape());
  walk_rows(x.shape(), st, st,
            [&](std::size_t o, std::size_t it, std::size_t, std::size_t n, std::size_t dt, std::size_t) {
              if (dt == 0) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += v[o + j];
                out[it] += acc;
              } else {
                for (std::size_t j = 0; j < n; ++j) out[it + j * dt] += v[o + j];
              }
            });
  return make_result(shape, std::move(out), "sum_to", {x},
                     [in_shape = x.shape()](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{broadcast_to(g, in_shape)};
                     });
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = axis_index(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  std::vector<double> out(outer * inner, 0.0);
  const auto v = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = v.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  Shape kept = s;
  kept[ax] = 1;
  Shape out_shape = kept;
  if (!keepdim) out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  return make_result(std::move(out_shape), std::move(out), "sum", {x},
                     [kept, in_shape = s](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{broadcast_to(reshape(g, kept), in_shape)};
                     });
}

Tensor sum_all(const Tensor& x) { return sum_to(x, Shape{}); }

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const double n = static_cast<double>(x.dim(axis));
  return scale(sum(x, axis, keepdim), 1.0 / n);
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Tensor concat_last(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last of nothing");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw std::invalid_argument("concat_last on scalars");
  const std::size_t rows = parts.front().numel() / first.back();
  std::size_t width = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin(), first.end() - 1, p.shape().begin())) {
      throw std::invalid_argument("concat_last leading shapes differ: " + shape_str(first) +
                                  " vs " + shape_str(p.shape()));
    }
    widths.push_back(p.dim(-1));
    width += p.dim(-1);
  }
  std::vector<double> out(rows * width);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * w, w, out.data() + r * width + offset);
    }
    offset += w;
  }
  return make_result(with_last(first, width), std::move(out), "concat_last", parts,
                     [widths](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(widths.size());
                       std::size_t start = 0;
                       for (std::size_t p = 0; p < widths.size(); ++p) {
                         if (need[p]) r[p] = slice_last(g, start, widths[p]);
                         start += widths[p];
                       }
                       return r;
                     });
}

Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length) {
  const std::size_t width = x.dim(-1);
  if (start + length > width) {
    throw std::out_of_range("slice [" + std::to_string(start) + ", " +
                            std::to_string(start + length) + ") of width " + std::to_string(width));
  }
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(rows * length);
  const auto v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.data() + r * width + start, length, out.data() + r * length);
  }
  return make_result(with_last(x.shape(), length), std::move(out), "slice_last", {x},
                     [in_shape = x.shape(), start, length, width](const Tensor& g,
                                                                  const std::vector<bool>&) {
                       std::vector<Tensor> pieces;
                       if (start > 0) pieces.push_back(Tensor::zeros(with_last(in_shape, start)));
                       pieces.push_back(g);
                       if (start + length < width) {
                         pieces.push_back(Tensor::zeros(with_last(in_shape, width - start - length)));
                       }
                       return std::vector<Tensor>{pieces.size() == 1 ? g : concat_last(pieces)};
                     });
}

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  if (logits.rank() == 0) throw std::invalid_argument("masked_softmax on a scalar");
  std::vector<double> additive;
  {
    NoGradGuard no_grad;
    additive = broadcast_to(mask.detach(), logits.shape()).to_vector();
  }
  const std::size_t width = logits.dim(-1);
  const std::size_t rows = logits.numel() / width;
  const auto x = logits.values();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * width;
    const double* mr = additive.data() + r * width;
    double* yr = out.data() + r * width;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j) {
      if (std::isfinite(mr[j])) top = std::max(top, xr[j] + mr[j]);
    }
    if (!std::isfinite(top)) continue;
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      yr[j] = std::isfinite(mr[j]) ? std::exp(xr[j] + mr[j] - top) : 0.0;
      total += yr[j];
    }
    for (std::size_t j = 0; j < width; ++j) yr[j] /= total;
  }
  return make_result(logits.shape(), std::move(out), "masked_softmax", {logits, mask},
                     [logits, mask](const Tensor& g, const std::vector<bool>& need) {
                       std::vector<Tensor> r(2);
                       if (need[0]) {
                         Tensor y = masked_softmax(logits, mask);
                         r[0] = mul(y, sub(g, sum(mul(g, y), -1, true)));
                       }
                       return r;
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  if (gain.numel() != x.dim(-1) || bias.numel() != x.dim(-1)) {
    throw std::invalid_argument("layer_norm affine size mismatch for " + shape_str(x.shape()));
  }
  Tensor centered = sub(x, mean(x, -1, true));
  Tensor variance = mean(square(centered), -1, true);
  Tensor normed = div(centered, sqrt(add(variance, Tensor::scalar(epsilon))));
  return add(mul(normed, gain), bias);
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

Tensor dropout(const Tensor& x, double probability, std::mt19937_64* rng) {
  if (probability <= 0.0 || rng == nullptr) return x;
  if (probability >= 1.0) throw std::invalid_argument("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - probability);
  std::vector<double> mask(x.numel());
  const double kept = 1.0 / (1.0 - probability);
  for (auto& m : mask) m = keep(*rng) ? kept : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> indices, Shape index_shape) {
  if (table.rank() != 2) throw std::invalid_argument("embedding table must be rank 2");
  if (shape_numel(index_shape) != indices.size()) {
    throw std::invalid_argument("embedding index shape does not match index count");
  }
  const std::size_t rows = table.dim(0), width = table.dim(1);
  const auto v = table.values();
  std::vector<double> out(indices.size() * width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= rows) {
      throw std::out_of_range("embedding index " + std::to_string(indices[i]) +
                              " outside table of " + std::to_string(rows) + " rows");
    }
    std::copy_n(v.data() + static_cast<std::size_t>(indices[i]) * width, width, out.data() + i * width);
  }
  index_shape.push_back(width);
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_result(std::move(index_shape), std::move(out), "embedding", {table},
                     [idx, rows](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{scatter_add_rows(g, idx, rows)};
                     });
}

Tensor scatter_add_rows(const Tensor& src, std::span<const std::int64_t> indices, std::size_t rows) {
  const std::size_t width = src.dim(-1);
  if (src.numel() != indices.size() * width) {
    throw std::invalid_argument("scatter_add_rows source does not match index count");
  }
  std::vector<double> out(rows * width, 0.0);
  const auto v = src.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto row = static_cast<std::size_t>(indices[i]);
    if (row >= rows) throw std::out_of_range("scatter_add_rows index out of range");
    for (std::size_t j = 0; j < width; ++j) out[row * width + j] += v[i * width + j];
  }
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return make_result({rows, width}, std::move(out), "scatter_add_rows", {src},
                     [idx, src_shape = src.shape()](const Tensor& g, const std::vector<bool>&) {
                       Shape lead(src_shape.begin(), src_shape.end() - 1);
                       return std::vector<Tensor>{embedding(g, idx, lead)};
                     });
}

Tensor rope(const Tensor& x, double base, int direction) {
  if (x.rank() < 2) throw std::invalid_argument("rope needs (..., N, D) input");
  const std::size_t n = x.dim(-2), d = x.dim(-1);
  if (d % 2 != 0) throw std::invalid_argument("rope needs an even head dimension, got " + std::to_string(d));
  const std::size_t half = d / 2;
  std::vector<double> cosines(n * half), sines(n * half);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t k = 0; k < half; ++k) {
      const double theta = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
      const double angle = static_cast<double>(direction) * static_cast<double>(pos) * theta;
      cosines[pos * half + k] = std::cos(angle);
      sines[pos * half + k] = std::sin(angle);
    }
  }
  const auto v = x.values();
  std::vector<double> out(v.size());
  const std::size_t blocks = x.numel() / (n * d);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t pos = 0; pos < n; ++pos) {
      const double* src = v.data() + (b * n + pos) * d;
      double* dst = out.data() + (b * n + pos) * d;
      for (std::size_t k = 0; k < half; ++k) {
        const double c = cosines[pos * half + k], s = sines[pos * half + k];
        dst[2 * k] = src[2 * k] * c - src[2 * k + 1] * s;
        dst[2 * k + 1] = src[2 * k] * s + src[2 * k + 1] * c;
      }
    }
  }
  return make_result(x.shape(), std::move(out), "rope", {x},
                     [base, direction](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{rope(g, base, -direction)};
                     });
}

Tensor masked_center(const Tensor& x, std::span<const std::size_t> counts) {
  if (x.rank() != 3 || counts.size() != x.dim(0)) {
    throw std::invalid_argument("masked_center needs (B, N, C) input with B counts");
  }
  const std::size_t batch = x.dim(0), rows = x.dim(1), cols = x.dim(2);
  const auto v = x.values();
  std::vector<double> out(v.size(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t count = counts[b];
    if (count > rows) throw std::invalid_argument("masked_center count exceeds row count");
    if (count == 0) continue;
    const double nd = static_cast<double>(count);
    const double* src = v.data() + b * rows * cols;
    double* dst = out.data() + b * rows * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      double total = 0.0;
      for (std::size_t i = 0; i < count; ++i) total += src[i * cols + c];
      for (std::size_t i = 0; i < count; ++i) dst[i * cols + c] = (nd * src[i * cols + c] - total) / nd;
    }
  }
  std::vector<std::size_t> kept(counts.begin(), counts.end());
  return make_result(x.shape(), std::move(out), "masked_center", {x},
                     [kept](const Tensor& g, const std::vector<bool>&) {
                       return std::vector<Tensor>{masked_center(g, kept)};
                     });
}

}  // namespace transip::ops
