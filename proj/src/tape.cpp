#include "afuse/tape.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "afuse/errors.hpp"

namespace afuse {

namespace {

constexpr std::array kPrimitiveNames = {
    std::pair{Primitive::kLeaf, std::string_view("leaf")},
    std::pair{Primitive::kConv2d, std::string_view("conv2d")},
    std::pair{Primitive::kAdd, std::string_view("add")},
    std::pair{Primitive::kSub, std::string_view("sub")},
    std::pair{Primitive::kMul, std::string_view("mul")},
    std::pair{Primitive::kDiv, std::string_view("div")},
    std::pair{Primitive::kMaximum, std::string_view("maximum")},
    std::pair{Primitive::kRelu, std::string_view("relu")},
    std::pair{Primitive::kSigmoid, std::string_view("sigmoid")},
    std::pair{Primitive::kLog, std::string_view("log")},
    std::pair{Primitive::kAffine, std::string_view("affine")},
    std::pair{Primitive::kSquare, std::string_view("square")},
    std::pair{Primitive::kSqrt, std::string_view("sqrt")},
    std::pair{Primitive::kClip, std::string_view("clip")},
    std::pair{Primitive::kSoftmax, std::string_view("softmax")},
    std::pair{Primitive::kConcat, std::string_view("concat")},
    std::pair{Primitive::kSlice, std::string_view("slice")},
    std::pair{Primitive::kGlobalAvgPool, std::string_view("global_avg_pool")},
    std::pair{Primitive::kChannelMax, std::string_view("channel_max")},
    std::pair{Primitive::kChannelMin, std::string_view("channel_min")},
    std::pair{Primitive::kChannelMean, std::string_view("channel_mean")},
    std::pair{Primitive::kSpatialMean, std::string_view("spatial_mean")},
    std::pair{Primitive::kMean, std::string_view("mean")},
    std::pair{Primitive::kSoftmaxCrossEntropy, std::string_view("softmax_cross_entropy")},
};

constexpr auto make_primitive_list() {
  std::array<Primitive, kPrimitiveNames.size() - 1> out{};
  for (std::size_t i = 1; i < kPrimitiveNames.size(); ++i) {
    out[i - 1] = kPrimitiveNames[i].first;
  }
  return out;
}
constexpr auto kPrimitives = make_primitive_list();

[[noreturn]] void shape_error(Primitive kind, const std::string& what) {
  throw ValidationError(std::string(to_string(kind)) + ": " + what);
}

std::size_t arity(Primitive kind) {
  switch (kind) {
    case Primitive::kAdd:
    case Primitive::kSub:
    case Primitive::kMul:
    case Primitive::kDiv:
    case Primitive::kMaximum:
      return 2;
    case Primitive::kConv2d:
    case Primitive::kConcat:
    case Primitive::kLeaf:
      return 0;  // variadic / checked separately
    default:
      return 1;
  }
}

// ----------------------------------------------------------------------------
// Broadcasting for binary ops.

struct BroadcastPlan {
  Shape out;
  bool same = false;
  bool a_scalar = false;
  bool b_scalar = false;
  std::vector<std::size_t> a_stride;  // per out axis; 0 on broadcast axes
  std::vector<std::size_t> b_stride;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[i] = st[i + 1] * static_cast<std::size_t>(s[i + 1]);
  }
  return st;
}

BroadcastPlan plan_broadcast(Primitive kind, const Shape& a, const Shape& b) {
  BroadcastPlan p;
  if (a == b) {
    p.same = true;
    p.out = a;
    return p;
  }
  if (numel(b) == 1) {
    p.b_scalar = true;
    p.out = a;
    return p;
  }
  if (numel(a) == 1) {
    p.a_scalar = true;
    p.out = b;
    return p;
  }
  if (a.size() != b.size()) {
    shape_error(kind, "cannot broadcast " + to_string(a) + " with " + to_string(b));
  }
  p.out.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      shape_error(kind, "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    p.out[i] = std::max(a[i], b[i]);
  }
  auto sa = strides_of(a);
  auto sb = strides_of(b);
  p.a_stride.resize(a.size());
  p.b_stride.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    p.a_stride[i] = a[i] == 1 ? 0 : sa[i];
    p.b_stride[i] = b[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& p, Fn&& fn) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  if (p.b_scalar) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, std::size_t{0});
    return;
  }
  if (p.a_scalar) {
    for (std::size_t i = 0; i < n; ++i) fn(i, std::size_t{0}, i);
    return;
  }
  const std::size_t rank = p.out.size();
  const std::size_t inner = static_cast<std::size_t>(p.out.back());
  const std::size_t as = p.a_stride.back();
  const std::size_t bs = p.b_stride.back();
  std::vector<int> idx(rank, 0);
  std::size_t ai = 0;
  std::size_t bi = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(o + j, ai + j * as, bi + j * bs);
    // advance the odometer over all but the innermost axis
    for (int ax = static_cast<int>(rank) - 2; ax >= 0; --ax) {
      if (++idx[ax] < p.out[ax]) {
        ai += p.a_stride[ax];
        bi += p.b_stride[ax];
        break;
      }
      ai -= p.a_stride[ax] * static_cast<std::size_t>(idx[ax] - 1);
      bi -= p.b_stride[ax] * static_cast<std::size_t>(idx[ax] - 1);
      idx[ax] = 0;
    }
  }
}

template <typename S, typename Op>
Tensor<S> binary_forward(Primitive kind, const Tensor<S>& a, const Tensor<S>& b, Op op) {
  auto plan = plan_broadcast(kind, a.shape(), b.shape());
  Tensor<S> out(plan.out);
  const S* ad = a.data();
  const S* bd = b.data();
  S* od = out.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { od[o] = op(ad[i], bd[j]); });
  return out;
}

// ----------------------------------------------------------------------------
// Convolution via im2col + GEMM.

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int batch, in_ch, out_ch, height, width, kernel, dilation, pad;
  int rows() const { return in_ch * kernel * kernel; }
  int pixels() const { return height * width; }
  bool pointwise() const { return kernel == 1; }
};

template <typename S>
ConvGeometry conv_geometry(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b, int dilation) {
  const auto kind = Primitive::kConv2d;
  if (x.rank() != 4) shape_error(kind, "input must be rank 4, got " + to_string(x.shape()));
  if (w.rank() != 4) shape_error(kind, "kernel must be rank 4, got " + to_string(w.shape()));
  if (w.dim(1) != x.dim(1)) {
    shape_error(kind, "kernel " + to_string(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                          " input channels, input " + to_string(x.shape()) + " has " + std::to_string(x.dim(1)));
  }
  if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0) {
    shape_error(kind, "kernel must be square with odd extent, got " + to_string(w.shape()));
  }
  if (dilation < 1) shape_error(kind, "dilation must be >= 1");
  if (b != nullptr && b->size() != static_cast<std::size_t>(w.dim(0))) {
    shape_error(kind, "bias " + to_string(b->shape()) + " does not match " + std::to_string(w.dim(0)) +
                          " output channels");
  }
  ConvGeometry g{x.dim(0), x.dim(1), w.dim(0), x.dim(2), x.dim(3), w.dim(2), dilation, 0};
  g.pad = dilation * (g.kernel - 1) / 2;
  return g;
}

template <typename S>
void im2col(const ConvGeometry& g, const S* image, RowMat<S>& cols) {
  cols.resize(g.rows(), g.pixels());
  const int H = g.height;
  const int W = g.width;
  for (int c = 0; c < g.in_ch; ++c) {
    const S* plane = image + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const int r = (c * g.kernel + ky) * g.kernel + kx;
        const int oy = ky * g.dilation - g.pad;
        const int ox = kx * g.dilation - g.pad;
        const int w0 = std::max(0, -ox);
        const int w1 = std::min(W, W - ox);
        S* row = cols.row(r).data();
        for (int h = 0; h < H; ++h) {
          S* dst = row + static_cast<std::size_t>(h) * W;
          const int ih = h + oy;
          if (ih < 0 || ih >= H || w0 >= w1) {
            std::fill(dst, dst + W, S(0));
            continue;
          }
          std::fill(dst, dst + w0, S(0));
          std::memcpy(dst + w0, plane + static_cast<std::size_t>(ih) * W + w0 + ox,
                      sizeof(S) * static_cast<std::size_t>(w1 - w0));
          std::fill(dst + w1, dst + W, S(0));
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const ConvGeometry& g, const RowMat<S>& cols, S* image) {
  const int H = g.height;
  const int W = g.width;
  for (int c = 0; c < g.in_ch; ++c) {
    S* plane = image + static_cast<std::size_t>(c) * H * W;
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const int r = (c * g.kernel + ky) * g.kernel + kx;
        const int oy = ky * g.dilation - g.pad;
        const int ox = kx * g.dilation - g.pad;
        const int w0 = std::max(0, -ox);
        const int w1 = std::min(W, W - ox);
        const S* row = cols.row(r).data();
        for (int h = 0; h < H; ++h) {
          const int ih = h + oy;
          if (ih < 0 || ih >= H) continue;
          const S* src = row + static_cast<std::size_t>(h) * W;
          S* dst = plane + static_cast<std::size_t>(ih) * W + ox;
          for (int w = w0; w < w1; ++w) dst[w] += src[w];
        }
      }
    }
  }
}

template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b, int dilation) {
  const ConvGeometry g = conv_geometry(x, w, b, dilation);
  Tensor<S> out({g.batch, g.out_ch, g.height, g.width});
  Eigen::Map<const RowMat<S>> wm(w.data(), g.out_ch, g.rows());
  RowMat<S> cols;
  const std::size_t in_stride = static_cast<std::size_t>(g.in_ch) * g.pixels();
  const std::size_t out_stride = static_cast<std::size_t>(g.out_ch) * g.pixels();
  for (int n = 0; n < g.batch; ++n) {
    Eigen::Map<RowMat<S>> om(out.data() + n * out_stride, g.out_ch, g.pixels());
    if (g.pointwise()) {
      om.noalias() = wm * Eigen::Map<const RowMat<S>>(x.data() + n * in_stride, g.in_ch, g.pixels());
    } else {
      im2col(g, x.data() + n * in_stride, cols);
      om.noalias() = wm * cols;
    }
    if (b != nullptr) {
      om.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b->data(), g.out_ch);
    }
  }
  return out;
}

template <typename S>
void conv2d_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* b, int dilation,
                     const Tensor<S>& gout, Tensor<S>* gx, Tensor<S>* gw, Tensor<S>* gb) {
  const ConvGeometry g = conv_geometry(x, w, b, dilation);
  Eigen::Map<const RowMat<S>> wm(w.data(), g.out_ch, g.rows());
  if (gx) *gx = Tensor<S>(x.shape());
  if (gw) *gw = Tensor<S>(w.shape());
  if (gb) *gb = Tensor<S>(b->shape());
  RowMat<S> cols;
  RowMat<S> dcols;
  const std::size_t in_stride = static_cast<std::size_t>(g.in_ch) * g.pixels();
  const std::size_t out_stride = static_cast<std::size_t>(g.out_ch) * g.pixels();
  for (int n = 0; n < g.batch; ++n) {
    Eigen::Map<const RowMat<S>> go(gout.data() + n * out_stride, g.out_ch, g.pixels());
    if (gb) {
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(gb->data(), g.out_ch) += go.rowwise().sum();
    }
    if (g.pointwise()) {
      Eigen::Map<const RowMat<S>> xm(x.data() + n * in_stride, g.in_ch, g.pixels());
      if (gw) Eigen::Map<RowMat<S>>(gw->data(), g.out_ch, g.rows()).noalias() += go * xm.transpose();
      if (gx) Eigen::Map<RowMat<S>>(gx->data() + n * in_stride, g.in_ch, g.pixels()).noalias() += wm.transpose() * go;
      continue;
    }
    if (gw) {
      im2col(g, x.data() + n * in_stride, cols);
      Eigen::Map<RowMat<S>>(gw->data(), g.out_ch, g.rows()).noalias() += go * cols.transpose();
    }
    if (gx) {
      dcols.noalias() = wm.transpose() * go;
      col2im_add(g, dcols, gx->data() + n * in_stride);
    }
  }
}

// ----------------------------------------------------------------------------
// Axis helpers: view a tensor as (outer, extent, inner) around one axis.

struct AxisView {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisView axis_view(Primitive kind, const Shape& s, int axis) {
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    shape_error(kind, "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  }
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= static_cast<std::size_t>(s[i]);
  v.extent = static_cast<std::size_t>(s[axis]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= static_cast<std::size_t>(s[i]);
  return v;
}

void require_rank4(Primitive kind, const Shape& s) {
  if (s.size() != 4) shape_error(kind, "expects a rank-4 (B,C,H,W) input, got " + to_string(s));
}

template <typename S>
Tensor<S> channel_reduce_forward(Primitive kind, const Tensor<S>& x) {
  require_rank4(kind, x.shape());
  const int B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<S> out({B, 1, x.dim(2), x.dim(3)});
  for (int n = 0; n < B; ++n) {
    const S* base = x.data() + static_cast<std::size_t>(n) * C * P;
    S* o = out.data() + static_cast<std::size_t>(n) * P;
    std::copy(base, base + P, o);
    for (int c = 1; c < C; ++c) {
      const S* plane = base + static_cast<std::size_t>(c) * P;
      for (int p = 0; p < P; ++p) {
        if (kind == Primitive::kChannelMax) {
          o[p] = std::max(o[p], plane[p]);
        } else if (kind == Primitive::kChannelMin) {
          o[p] = std::min(o[p], plane[p]);
        } else {
          o[p] += plane[p];
        }
      }
    }
    if (kind == Primitive::kChannelMean) {
      for (int p = 0; p < P; ++p) o[p] /= static_cast<S>(C);
    }
  }
  return out;
}

template <typename S>
Tensor<S> channel_reduce_backward(Primitive kind, const Tensor<S>& x, const Tensor<S>& out, const Tensor<S>& g) {
  const int B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
  Tensor<S> gx(x.shape());
  for (int n = 0; n < B; ++n) {
    const S* base = x.data() + static_cast<std::size_t>(n) * C * P;
    const S* o = out.data() + static_cast<std::size_t>(n) * P;
    const S* gn = g.data() + static_cast<std::size_t>(n) * P;
    S* gb = gx.data() + static_cast<std::size_t>(n) * C * P;
    if (kind == Primitive::kChannelMean) {
      for (int c = 0; c < C; ++c)
        for (int p = 0; p < P; ++p) gb[static_cast<std::size_t>(c) * P + p] = gn[p] / static_cast<S>(C);
      continue;
    }
    // route to the first channel attaining the extremum
    for (int p = 0; p < P; ++p) {
      for (int c = 0; c < C; ++c) {
        if (base[static_cast<std::size_t>(c) * P + p] == o[p]) {
          gb[static_cast<std::size_t>(c) * P + p] = gn[p];
          break;
        }
      }
    }
  }
  return gx;
}

template <typename S>
Tensor<S> softmax_forward(const Tensor<S>& x, int axis) {
  const AxisView v = axis_view(Primitive::kSoftmax, x.shape(), axis);
  Tensor<S> out(x.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (std::size_t k = 0; k < v.extent; ++k) m = std::max(m, x[base + k * v.inner]);
      S sum = 0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const S e = std::exp(x[base + k * v.inner] - m);
        out[base + k * v.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) out[base + k * v.inner] /= sum;
    }
  }
  return out;
}

template <typename S>
Tensor<S> softmax_backward(const Tensor<S>& y, const Tensor<S>& g, int axis) {
  const AxisView v = axis_view(Primitive::kSoftmax, y.shape(), axis);
  Tensor<S> gx(y.shape());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      S dot = 0;
      for (std::size_t k = 0; k < v.extent; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
      for (std::size_t k = 0; k < v.extent; ++k) {
        gx[base + k * v.inner] = y[base + k * v.inner] * (g[base + k * v.inner] - dot);
      }
    }
  }
  return gx;
}

template <typename S>
Tensor<S> concat_forward(std::span<const Tensor<S>* const> xs, int axis) {
  const auto kind = Primitive::kConcat;
  if (xs.empty()) shape_error(kind, "needs at least one input");
  Shape out_shape = xs[0]->shape();
  if (axis < 0 || axis >= static_cast<int>(out_shape.size())) {
    shape_error(kind, "axis " + std::to_string(axis) + " out of range for " + to_string(out_shape));
  }
  int total = 0;
  for (const auto* t : xs) {
    Shape s = t->shape();
    if (s.size() != out_shape.size()) shape_error(kind, "rank mismatch " + to_string(s) + " vs " + to_string(out_shape));
    total += s[axis];
    s[axis] = out_shape[axis];
    if (s != out_shape) shape_error(kind, "extent mismatch " + to_string(t->shape()) + " vs " + to_string(xs[0]->shape()));
  }
  out_shape[axis] = total;
  Tensor<S> out(out_shape);
  const AxisView ov = axis_view(kind, out_shape, axis);
  std::size_t offset = 0;
  for (const auto* t : xs) {
    const std::size_t chunk = static_cast<std::size_t>(t->dim(axis)) * ov.inner;
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(t->data() + o * chunk, chunk, out.data() + o * ov.extent * ov.inner + offset);
    }
    offset += chunk;
  }
  return out;
}

template <typename S>
Tensor<S> slice_forward(const Tensor<S>& x, const Attributes& a) {
  const auto kind = Primitive::kSlice;
  const AxisView v = axis_view(kind, x.shape(), a.axis);
  if (a.start < 0 || a.length <= 0 || static_cast<std::size_t>(a.start + a.length) > v.extent) {
    shape_error(kind, "range [" + std::to_string(a.start) + ", " + std::to_string(a.start + a.length) +
                          ") outside extent " + std::to_string(v.extent) + " of " + to_string(x.shape()));
  }
  Shape s = x.shape();
  s[a.axis] = a.length;
  Tensor<S> out(s);
  const std::size_t chunk = static_cast<std::size_t>(a.length) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(x.data() + o * v.extent * v.inner + static_cast<std::size_t>(a.start) * v.inner, chunk,
                out.data() + o * chunk);
  }
  return out;
}

template <typename S>
Tensor<S> softmax_xent_forward(const Tensor<S>& logits, const Attributes& a, Tensor<S>* probs) {
  const auto kind = Primitive::kSoftmaxCrossEntropy;
  require_rank4(kind, logits.shape());
  const int B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  if (!a.labels || a.labels->size() != static_cast<std::size_t>(B) * P) {
    shape_error(kind, "expects " + std::to_string(static_cast<std::size_t>(B) * P) + " labels for logits " +
                          to_string(logits.shape()));
  }
  const auto& labels = *a.labels;
  double total = 0;
  if (probs) *probs = Tensor<S>(logits.shape());
  for (int n = 0; n < B; ++n) {
    const S* base = logits.data() + static_cast<std::size_t>(n) * K * P;
    for (int p = 0; p < P; ++p) {
      const int label = labels[static_cast<std::size_t>(n) * P + p];
      if (label < 0 || label >= K) {
        throw ValidationError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                              std::to_string(K) + ")");
      }
      S m = base[p];
      for (int k = 1; k < K; ++k) m = std::max(m, base[static_cast<std::size_t>(k) * P + p]);
      S sum = 0;
      for (int k = 0; k < K; ++k) sum += std::exp(base[static_cast<std::size_t>(k) * P + p] - m);
      const S lse = m + std::log(sum);
      total += static_cast<double>(lse - base[static_cast<std::size_t>(label) * P + p]);
      if (probs) {
        S* pr = probs->data() + static_cast<std::size_t>(n) * K * P;
        for (int k = 0; k < K; ++k) {
          pr[static_cast<std::size_t>(k) * P + p] = std::exp(base[static_cast<std::size_t>(k) * P + p] - lse);
        }
      }
    }
  }
  return Tensor<S>({1}, static_cast<S>(total / (static_cast<double>(B) * P)));
}

template <typename S>
Tensor<S> reduce_broadcast_grad(const Tensor<S>& g, const BroadcastPlan& plan, const Shape& target, bool left,
                                const std::function<S(std::size_t, std::size_t, std::size_t)>& factor) {
  Tensor<S> out(target);
  S* od = out.data();
  for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
    od[left ? i : j] += g[o] * factor(o, i, j);
  });
  return out;
}

}  // namespace

std::string_view to_string(Primitive kind) {
  for (const auto& [k, name] : kPrimitiveNames) {
    if (k == kind) return name;
  }
  return "?";
}

Primitive primitive_from_string(std::string_view name) {
  for (const auto& [k, n] : kPrimitiveNames) {
    if (n == name && k != Primitive::kLeaf) return k;
  }
  throw ValidationError("unknown primitive '" + std::string(name) + "'");
}

std::span<const Primitive> all_primitives() { return kPrimitives; }

template <typename S>
Tensor<S> evaluate_primitive(Primitive kind, std::span<const Tensor<S>* const> in, const Attributes& a) {
  const std::size_t expected = arity(kind);
  if (kind == Primitive::kLeaf) throw ValidationError("leaf is not an applicable primitive");
  if (expected != 0 && in.size() != expected) {
    shape_error(kind, "expects " + std::to_string(expected) + " inputs, got " + std::to_string(in.size()));
  }
  switch (kind) {
    case Primitive::kConv2d:
      if (in.size() != 2 && in.size() != 3) shape_error(kind, "expects (x, w) or (x, w, b)");
      return conv2d_forward(*in[0], *in[1], in.size() == 3 ? in[2] : nullptr, a.dilation);
    case Primitive::kAdd:
      return binary_forward(kind, *in[0], *in[1], [](S x, S y) { return x + y; });
    case Primitive::kSub:
      return binary_forward(kind, *in[0], *in[1], [](S x, S y) { return x - y; });
    case Primitive::kMul:
      return binary_forward(kind, *in[0], *in[1], [](S x, S y) { return x * y; });
    case Primitive::kDiv:
      return binary_forward(kind, *in[0], *in[1], [](S x, S y) { return x / y; });
    case Primitive::kMaximum:
      return binary_forward(kind, *in[0], *in[1], [](S x, S y) { return std::max(x, y); });
    case Primitive::kRelu:
      return Tensor<S>(in[0]->shape(), in[0]->array().max(S(0)).eval());
    case Primitive::kSigmoid:
      return Tensor<S>(in[0]->shape(), (S(1) / (S(1) + (-in[0]->array()).exp())).eval());
    case Primitive::kLog:
      return Tensor<S>(in[0]->shape(), in[0]->array().log().eval());
    case Primitive::kAffine:
      return Tensor<S>(in[0]->shape(), (static_cast<S>(a.scale) * in[0]->array() + static_cast<S>(a.shift)).eval());
    case Primitive::kSquare:
      return Tensor<S>(in[0]->shape(), in[0]->array().square().eval());
    case Primitive::kSqrt:
      return Tensor<S>(in[0]->shape(), in[0]->array().sqrt().eval());
    case Primitive::kClip:
      if (a.lo > a.hi) shape_error(kind, "lo > hi");
      return Tensor<S>(in[0]->shape(),
                       in[0]->array().max(static_cast<S>(a.lo)).min(static_cast<S>(a.hi)).eval());
    case Primitive::kSoftmax:
      return softmax_forward(*in[0], a.axis);
    case Primitive::kConcat:
      return concat_forward<S>(in, a.axis);
    case Primitive::kSlice:
      return slice_forward(*in[0], a);
    case Primitive::kGlobalAvgPool: {
      require_rank4(kind, in[0]->shape());
      const auto& x = *in[0];
      const int B = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
      Eigen::Map<const RowMat<S>> xm(x.data(), B * C, P);
      Tensor<S> out({B, C, 1, 1});
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(out.data(), B * C) = xm.rowwise().mean();
      return out;
    }
    case Primitive::kChannelMax:
    case Primitive::kChannelMin:
    case Primitive::kChannelMean:
      return channel_reduce_forward(kind, *in[0]);
    case Primitive::kSpatialMean: {
      const auto& x = *in[0];
      if (x.rank() < 2) shape_error(kind, "expects rank >= 2, got " + to_string(x.shape()));
      const int B = x.dim(0);
      const auto per = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(B));
      Shape s(x.shape().size(), 1);
      s[0] = B;
      Tensor<S> out(s);
      Eigen::Map<const RowMat<S>> xm(x.data(), B, per);
      Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(out.data(), B) = xm.rowwise().mean();
      return out;
    }
    case Primitive::kMean:
      return Tensor<S>({1}, in[0]->array().mean());
    case Primitive::kSoftmaxCrossEntropy:
      return softmax_xent_forward<S>(*in[0], a, nullptr);
    case Primitive::kLeaf:
      break;
  }
  throw ValidationError("unknown primitive");
}

template <typename S>
Var<S> Tape<S>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename S>
Var<S> Tape<S>::param(const std::string& name) {
  auto it = leaf_ids_.find(name);
  if (it != leaf_ids_.end()) return Var<S>{this, it->second};
  if (params_ == nullptr) throw ValidationError("tape has no parameter store bound; asked for '" + name + "'");
  Node n;
  n.value = params_->at(name);
  n.name = name;
  n.requires_grad = !trainable_ || trainable_(name);
  auto v = push(std::move(n));
  leaf_ids_.emplace(name, v.id);
  return v;
}

template <typename S>
Var<S> Tape<S>::input(const std::string& name, Tensor<S> value) {
  if (leaf_ids_.contains(name)) throw ValidationError("duplicate leaf name '" + name + "'");
  if (params_ != nullptr && params_->contains(name)) {
    throw ValidationError("input name '" + name + "' collides with a parameter");
  }
  Node n;
  n.value = std::move(value);
  n.name = name;
  n.requires_grad = true;
  auto v = push(std::move(n));
  leaf_ids_.emplace(name, v.id);
  return v;
}

template <typename S>
Var<S> Tape<S>::constant(Tensor<S> value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename S>
Var<S> Tape<S>::apply(Primitive kind, std::span<const Var<S>> inputs, const Attributes& attrs) {
  std::vector<const Tensor<S>*> values;
  values.reserve(inputs.size());
  Node n;
  n.kind = kind;
  n.attrs = attrs;
  for (const auto& v : inputs) {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw ValidationError(std::string(to_string(kind)) + ": input does not belong to this tape");
    }
    values.push_back(&nodes_[static_cast<std::size_t>(v.id)].value);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(v.id)].requires_grad;
  }
  n.value = evaluate_primitive<S>(kind, values, attrs);
  return push(std::move(n));
}

template <typename S>
Gradients<S> Tape<S>::backward(Var<S> loss) const {
  if (loss.tape != this) throw ValidationError("backward: loss belongs to another tape");
  const Node& root = node(loss.id);
  if (root.value.size() != 1) {
    throw ValidationError("backward: loss must be scalar-shaped, got " + to_string(root.value.shape()));
  }
  std::vector<Tensor<S>> grads(nodes_.size());
  grads[static_cast<std::size_t>(loss.id)] = Tensor<S>(root.value.shape(), S(1));

  auto accumulate = [&](int id, Tensor<S>&& g) {
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (slot.empty()) {
      slot = std::move(g);
    } else {
      slot.array() += g.array();
    }
  };

  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    Tensor<S>& g = grads[static_cast<std::size_t>(id)];
    if (g.empty() || !n.requires_grad || n.kind == Primitive::kLeaf) continue;
    auto need = [&](std::size_t i) { return nodes_[static_cast<std::size_t>(n.inputs[i])].requires_grad; };
    auto in = [&](std::size_t i) -> const Tensor<S>& { return nodes_[static_cast<std::size_t>(n.inputs[i])].value; };
    const Tensor<S>& y = n.value;
    const auto& ga = g.array();

    switch (n.kind) {
      case Primitive::kConv2d: {
        const bool has_bias = n.inputs.size() == 3;
        Tensor<S> gx, gw, gb;
        conv2d_backward(in(0), in(1), has_bias ? &in(2) : nullptr, n.attrs.dilation, g, need(0) ? &gx : nullptr,
                        need(1) ? &gw : nullptr, has_bias && need(2) ? &gb : nullptr);
        if (need(0)) accumulate(n.inputs[0], std::move(gx));
        if (need(1)) accumulate(n.inputs[1], std::move(gw));
        if (has_bias && need(2)) accumulate(n.inputs[2], std::move(gb));
        break;
      }
      case Primitive::kAdd:
      case Primitive::kSub:
      case Primitive::kMul:
      case Primitive::kDiv:
      case Primitive::kMaximum: {
        const Tensor<S>& a = in(0);
        const Tensor<S>& b = in(1);
        const auto plan = plan_broadcast(n.kind, a.shape(), b.shape());
        const S* ad = a.data();
        const S* bd = b.data();
        std::function<S(std::size_t, std::size_t, std::size_t)> fa, fb;
        switch (n.kind) {
          case Primitive::kAdd:
            fa = fb = [](std::size_t, std::size_t, std::size_t) { return S(1); };
            break;
          case Primitive::kSub:
            fa = [](std::size_t, std::size_t, std::size_t) { return S(1); };
            fb = [](std::size_t, std::size_t, std::size_t) { return S(-1); };
            break;
          case Primitive::kMul:
            fa = [bd](std::size_t, std::size_t, std::size_t j) { return bd[j]; };
            fb = [ad](std::size_t, std::size_t i, std::size_t) { return ad[i]; };
            break;
          case Primitive::kDiv:
            fa = [bd](std::size_t, std::size_t, std::size_t j) { return S(1) / bd[j]; };
            fb = [ad, bd](std::size_t, std::size_t i, std::size_t j) { return -ad[i] / (bd[j] * bd[j]); };
            break;
          default:
            fa = [ad, bd](std::size_t, std::size_t i, std::size_t j) { return ad[i] >= bd[j] ? S(1) : S(0); };
            fb = [ad, bd](std::size_t, std::size_t i, std::size_t j) { return ad[i] >= bd[j] ? S(0) : S(1); };
            break;
        }
        if (plan.same && (n.kind == Primitive::kAdd || n.kind == Primitive::kSub || n.kind == Primitive::kMul)) {
          if (need(0)) {
            accumulate(n.inputs[0], n.kind == Primitive::kMul ? Tensor<S>(a.shape(), (ga * b.array()).eval())
                                                              : Tensor<S>(a.shape(), ga));
          }
          if (need(1)) {
            Tensor<S> gb_t(b.shape(), n.kind == Primitive::kMul   ? (ga * a.array()).eval()
                                      : n.kind == Primitive::kSub ? (-ga).eval()
                                                                  : ga);
            accumulate(n.inputs[1], std::move(gb_t));
          }
          break;
        }
        if (need(0)) accumulate(n.inputs[0], reduce_broadcast_grad(g, plan, a.shape(), true, fa));
        if (need(1)) accumulate(n.inputs[1], reduce_broadcast_grad(g, plan, b.shape(), false, fb));
        break;
      }
      case Primitive::kRelu:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (in(0).array() > S(0)).select(ga, S(0)).eval()));
        break;
      case Primitive::kSigmoid:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (ga * y.array() * (S(1) - y.array())).eval()));
        break;
      case Primitive::kLog:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (ga / in(0).array()).eval()));
        break;
      case Primitive::kAffine:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (ga * static_cast<S>(n.attrs.scale)).eval()));
        break;
      case Primitive::kSquare:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (ga * S(2) * in(0).array()).eval()));
        break;
      case Primitive::kSqrt:
        accumulate(n.inputs[0], Tensor<S>(y.shape(), (ga * S(0.5) / y.array()).eval()));
        break;
      case Primitive::kClip: {
        const auto& x = in(0).array();
        const S lo = static_cast<S>(n.attrs.lo);
        const S hi = static_cast<S>(n.attrs.hi);
        accumulate(n.inputs[0], Tensor<S>(y.shape(), ((x >= lo) && (x <= hi)).select(ga, S(0)).eval()));
        break;
      }
      case Primitive::kSoftmax:
        accumulate(n.inputs[0], softmax_backward(y, g, n.attrs.axis));
        break;
      case Primitive::kConcat: {
        const AxisView ov = axis_view(n.kind, y.shape(), n.attrs.axis);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const Tensor<S>& x = in(i);
          const std::size_t chunk = static_cast<std::size_t>(x.dim(n.attrs.axis)) * ov.inner;
          if (need(i)) {
            Tensor<S> gx(x.shape());
            for (std::size_t o = 0; o < ov.outer; ++o) {
              std::copy_n(g.data() + o * ov.extent * ov.inner + offset, chunk, gx.data() + o * chunk);
            }
            accumulate(n.inputs[i], std::move(gx));
          }
          offset += chunk;
        }
        break;
      }
      case Primitive::kSlice: {
        const Tensor<S>& x = in(0);
        const AxisView v = axis_view(n.kind, x.shape(), n.attrs.axis);
        Tensor<S> gx(x.shape());
        const std::size_t chunk = static_cast<std::size_t>(n.attrs.length) * v.inner;
        for (std::size_t o = 0; o < v.outer; ++o) {
          std::copy_n(g.data() + o * chunk, chunk,
                      gx.data() + o * v.extent * v.inner + static_cast<std::size_t>(n.attrs.start) * v.inner);
        }
        accumulate(n.inputs[0], std::move(gx));
        break;
      }
      case Primitive::kGlobalAvgPool: {
        const Tensor<S>& x = in(0);
        const int BC = x.dim(0) * x.dim(1);
        const int P = x.dim(2) * x.dim(3);
        Tensor<S> gx(x.shape());
        Eigen::Map<RowMat<S>> gm(gx.data(), BC, P);
        gm.colwise() = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(g.data(), BC) / static_cast<S>(P);
        accumulate(n.inputs[0], std::move(gx));
        break;
      }
      case Primitive::kChannelMax:
      case Primitive::kChannelMin:
      case Primitive::kChannelMean:
        accumulate(n.inputs[0], channel_reduce_backward(n.kind, in(0), y, g));
        break;
      case Primitive::kSpatialMean: {
        const Tensor<S>& x = in(0);
        const int B = x.dim(0);
        const auto per = static_cast<Eigen::Index>(x.size() / static_cast<std::size_t>(B));
        Tensor<S> gx(x.shape());
        Eigen::Map<RowMat<S>> gm(gx.data(), B, per);
        gm.colwise() = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(g.data(), B) / static_cast<S>(per);
        accumulate(n.inputs[0], std::move(gx));
        break;
      }
      case Primitive::kMean: {
        const Tensor<S>& x = in(0);
        accumulate(n.inputs[0], Tensor<S>(x.shape(), g.item() / static_cast<S>(x.size())));
        break;
      }
      case Primitive::kSoftmaxCrossEntropy: {
        const Tensor<S>& logits = in(0);
        Tensor<S> probs;
        softmax_xent_forward(logits, n.attrs, &probs);
        const int B = logits.dim(0), K = logits.dim(1), P = logits.dim(2) * logits.dim(3);
        const auto& labels = *n.attrs.labels;
        for (int b = 0; b < B; ++b) {
          for (int p = 0; p < P; ++p) {
            probs[(static_cast<std::size_t>(b) * K + labels[static_cast<std::size_t>(b) * P + p]) * P + p] -= S(1);
          }
        }
        probs.array() *= g.item() / static_cast<S>(static_cast<std::size_t>(B) * P);
        accumulate(n.inputs[0], std::move(probs));
        break;
      }
      case Primitive::kLeaf:
        break;
    }
  }

  Gradients<S> out;
  auto grad_or_zero = [&](const std::string& name, const Shape& shape) {
    auto it = leaf_ids_.find(name);
    if (it != leaf_ids_.end() && !grads[static_cast<std::size_t>(it->second)].empty()) {
      return grads[static_cast<std::size_t>(it->second)];
    }
    return Tensor<S>(shape);
  };
  if (params_ != nullptr) {
    for (const auto& [name, t] : *params_) out.emplace(name, grad_or_zero(name, t.shape()));
  }
  for (const auto& [name, id] : leaf_ids_) {
    if (!out.contains(name)) out.emplace(name, grad_or_zero(name, node(id).value.shape()));
  }
  return out;
}

template class Tape<float>;
template class Tape<double>;
template Tensor<float> evaluate_primitive(Primitive, std::span<const Tensor<float>* const>, const Attributes&);
template Tensor<double> evaluate_primitive(Primitive, std::span<const Tensor<double>* const>, const Attributes&);

}  // namespace afuse
