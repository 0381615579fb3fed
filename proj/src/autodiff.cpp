#include "snapdistill/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace snapdistill {

namespace {

template <typename Scalar>
using ArrayOf = typename Tensor<Scalar>::Array;

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::Matrix;

template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

template <typename Scalar>
void require_same_graph(Var<Scalar> a, Var<Scalar> b, const char* op) {
  require(&a.graph() == &b.graph(), std::string(op) + ": operands belong to different graphs");
}

struct ConvGeometry {
  Index batch, channels, height, width;
  Index out_channels, kernel_h, kernel_w;
  Index stride, padding;
  Index out_h, out_w;

  Index patch() const { return channels * kernel_h * kernel_w; }
  Index out_pixels() const { return out_h * out_w; }
};

// col [C*kh*kw, out_h*out_w] from one [C, H, W] sample.
template <typename Scalar>
void im2col(const Scalar* image, const ConvGeometry& g, Scalar* col) {
  const Index pixels = g.out_pixels();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        Scalar* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * pixels;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj;
            row[oy * g.out_w + ox] = (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                                         ? image[(c * g.height + iy) * g.width + ix]
                                         : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, const ConvGeometry& g, Scalar* image) {
  const Index pixels = g.out_pixels();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kernel_h; ++ki) {
      for (Index kj = 0; kj < g.kernel_w; ++kj) {
        const Scalar* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * pixels;
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox * g.stride - g.padding + kj;
            if (ix < 0 || ix >= g.width) continue;
            image[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

struct PoolGeometry {
  Index batch, channels, height, width;
  Index kernel, stride;
  Index out_h, out_w;
};

PoolGeometry pool_geometry(const Shape& s, Index kernel, Index stride, const char* op) {
  require(s.size() == 4, std::string(op) + ": expected [B, C, H, W], got " + shape_string(s));
  require(kernel > 0 && stride > 0, std::string(op) + ": kernel and stride must be positive");
  require(s[2] >= kernel && s[3] >= kernel, std::string(op) + ": kernel larger than input");
  PoolGeometry g{s[0], s[1], s[2], s[3], kernel, stride, 0, 0};
  g.out_h = (g.height - kernel) / stride + 1;
  g.out_w = (g.width - kernel) / stride + 1;
  return g;
}

// Channel layout of a batch-norm input: [B, C] or [B, C, H, W].
struct ChannelLayout {
  Index batch, channels, spatial;
};

ChannelLayout channel_layout(const Shape& s) {
  require(s.size() == 2 || s.size() == 4,
          "batch_norm: expected [B, C] or [B, C, H, W], got " + shape_string(s));
  return {s[0], s[1], s.size() == 4 ? s[2] * s[3] : 1};
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

template <typename Scalar>
GradBuffer<Scalar>::GradBuffer(const Graph<Scalar>& graph) : graph_(graph), grads_(graph.size()) {}

template <typename Scalar>
typename GradBuffer<Scalar>::Array* GradBuffer<Scalar>::slot(NodeId node) {
  if (!graph_.requires_grad(node)) return nullptr;
  auto& g = grads_[node];
  if (!g) g = Array::Zero(graph_.value(node).size());
  return &*g;
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::leaf(Tensor<Scalar> value, bool requires_grad) {
  nodes_.push_back(Node{requires_grad ? "leaf" : "constant", {}, std::move(value), {}, requires_grad});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(std::string_view op, std::vector<NodeId> inputs, Tensor<Scalar> value,
                                  BackwardFn backward) {
  bool needs = false;
  for (NodeId in : inputs) {
    require(in < nodes_.size(), "graph: input node " + std::to_string(in) + " does not exist");
    needs = needs || nodes_[in].requires_grad;
  }
  nodes_.push_back(Node{std::string(op), std::move(inputs), std::move(value),
                        needs ? std::move(backward) : BackwardFn{}, needs});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
std::optional<NodeId> Graph<Scalar>::first_non_finite() const {
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].value.all_finite()) return id;
  }
  return std::nullopt;
}

template <typename Scalar>
GradientMap<Scalar> backward(const Graph<Scalar>& graph, Var<Scalar> loss) {
  require(&loss.graph() == &graph, "backward: loss belongs to a different graph");
  require(loss.value().size() == 1,
          "backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  if (auto bad = graph.first_non_finite()) {
    throw NumericFailure("non-finite value at node " + std::to_string(*bad) + " (" + graph.op(*bad) + ")",
                         *bad);
  }

  GradBuffer<Scalar> grads(graph);
  if (graph.requires_grad(loss.id())) grads.raw(loss.id()) = ArrayOf<Scalar>::Ones(1);

  GradientMap<Scalar> result;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    if (!grads.has(id)) continue;
    const auto& g = grads.at(id);
    if (!g.isFinite().all()) {
      throw NumericFailure("non-finite gradient at node " + std::to_string(id) + " (" + graph.op(id) + ")", id);
    }
    if (graph.is_leaf(id)) continue;
    graph.backward_fn(id)(g, grads);
    grads.raw(id).reset();
  }

  for (NodeId id = 0; id < graph.size(); ++id) {
    if (!graph.is_leaf(id) || !graph.requires_grad(id)) continue;
    const auto& shape = graph.value(id).shape();
    if (grads.has(id)) {
      result.emplace(id, Tensor<Scalar>(shape, grads.at(id)));
    } else {
      result.emplace(id, Tensor<Scalar>(shape, ArrayOf<Scalar>::Zero(shape_size(shape))));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dense algebra

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
          "matmul: incompatible shapes " + shape_string(sa) + " x " + shape_string(sb));
  const Index m = sa[0], k = sa[1], n = sb[1];
  Tensor<Scalar> out(Shape{m, n});
  out.matrix(m, n).noalias() = a.value().matrix(m, k) * b.value().matrix(k, n);
  auto& graph = a.graph();
  const NodeId ia = a.id(), ib = b.id();
  return graph.record("matmul", {ia, ib}, std::move(out),
                      [&graph, ia, ib, m, k, n](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                        ConstMatMap<Scalar> dy(up.data(), m, n);
                        if (auto* ga = grads.slot(ia)) {
                          MatMap<Scalar>(ga->data(), m, k).noalias() += dy * graph.value(ib).matrix(k, n).transpose();
                        }
                        if (auto* gb = grads.slot(ib)) {
                          MatMap<Scalar>(gb->data(), k, n).noalias() += graph.value(ia).matrix(m, k).transpose() * dy;
                        }
                      });
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  require_same_graph(x, weight, "linear");
  require_same_graph(x, bias, "linear");
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  require(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1] && bias.shape() == Shape{sw[0]},
          "linear: incompatible shapes x" + shape_string(sx) + " W" + shape_string(sw) + " b" +
              shape_string(bias.shape()));
  const Index batch = sx[0], in = sx[1], outs = sw[0];
  Tensor<Scalar> out(Shape{batch, outs});
  auto y = out.matrix(batch, outs);
  y.noalias() = x.value().matrix(batch, in) * weight.value().matrix(outs, in).transpose();
  y.rowwise() += bias.value().values().matrix().transpose();
  auto& graph = x.graph();
  const NodeId ix = x.id(), iw = weight.id(), ib = bias.id();
  return graph.record(
      "linear", {ix, iw, ib}, std::move(out),
      [&graph, ix, iw, ib, batch, in, outs](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
        ConstMatMap<Scalar> dy(up.data(), batch, outs);
        if (auto* gx = grads.slot(ix)) {
          MatMap<Scalar>(gx->data(), batch, in).noalias() += dy * graph.value(iw).matrix(outs, in);
        }
        if (auto* gw = grads.slot(iw)) {
          MatMap<Scalar>(gw->data(), outs, in).noalias() += dy.transpose() * graph.value(ix).matrix(batch, in);
        }
        if (auto* gb = grads.slot(ib)) {
          gb->matrix() += dy.colwise().sum().transpose();
        }
      });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b, "add");
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Scalar> out(a.shape(), a.value().values() + b.value().values());
  const NodeId ia = a.id(), ib = b.id();
  return a.graph().record("add", {ia, ib}, std::move(out),
                          [ia, ib](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            grads.add(ia, up);
                            grads.add(ib, up);
                          });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  require_same_graph(a, b, "mul");
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<Scalar> out(a.shape(), a.value().values() * b.value().values());
  auto& graph = a.graph();
  const NodeId ia = a.id(), ib = b.id();
  return graph.record("mul", {ia, ib}, std::move(out),
                      [&graph, ia, ib](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                        if (auto* ga = grads.slot(ia)) *ga += up * graph.value(ib).values();
                        if (auto* gb = grads.slot(ib)) *gb += up * graph.value(ia).values();
                      });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor) {
  Tensor<Scalar> out(x.shape(), x.value().values() * factor);
  const NodeId ix = x.id();
  return x.graph().record("scale", {ix}, std::move(out),
                          [ix, factor](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            grads.add(ix, up * factor);
                          });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> x, Scalar offset) {
  Tensor<Scalar> out(x.shape(), x.value().values() + offset);
  const NodeId ix = x.id();
  return x.graph().record("add_scalar", {ix}, std::move(out),
                          [ix](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) { grads.add(ix, up); });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape(), x.value().values().max(Scalar(0)));
  auto& graph = x.graph();
  const NodeId ix = x.id();
  return graph.record("relu", {ix}, std::move(out),
                      [&graph, ix](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                        if (auto* gx = grads.slot(ix)) {
                          *gx += (graph.value(ix).values() > Scalar(0)).select(up, Scalar(0));
                        }
                      });
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
  require(shape_size(shape) == x.value().size(),
          "reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  Tensor<Scalar> out(std::move(shape), x.value().values());
  const NodeId ix = x.id();
  return x.graph().record("reshape", {ix}, std::move(out),
                          [ix](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) { grads.add(ix, up); });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  auto out = Tensor<Scalar>::scalar(x.value().values().sum());
  const NodeId ix = x.id();
  const Index n = x.value().size();
  return x.graph().record("sum", {ix}, std::move(out),
                          [ix, n](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            grads.add(ix, ArrayOf<Scalar>::Constant(n, up[0]));
                          });
}

template <typename Scalar>
Var<Scalar> weighted_sum(Var<Scalar> x, const Tensor<Scalar>& weights) {
  require(weights.shape() == x.shape(),
          "weighted_sum: weights " + shape_string(weights.shape()) + " vs input " + shape_string(x.shape()));
  auto out = Tensor<Scalar>::scalar((weights.values() * x.value().values()).sum());
  const NodeId ix = x.id();
  return x.graph().record("weighted_sum", {ix}, std::move(out),
                          [ix, w = weights.values()](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            grads.add(ix, w * up[0]);
                          });
}

// ---------------------------------------------------------------------------
// Softmax family

template <typename Scalar>
Tensor<Scalar> log_softmax_with_temperature(const Tensor<Scalar>& logits, Scalar temperature) {
  if (!(temperature > Scalar(0))) {
    throw ConfigError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  require(logits.rank() >= 1, "softmax: logits need at least one axis");
  const Index classes = logits.shape().back();
  const Index rows = logits.size() / classes;
  Tensor<Scalar> out(logits.shape());
  auto z = logits.matrix(rows, classes);
  auto y = out.matrix(rows, classes);
  for (Index r = 0; r < rows; ++r) {
    auto scaled = (z.row(r).array() / temperature).eval();
    const Scalar m = scaled.maxCoeff();
    const Scalar lse = m + std::log((scaled - m).exp().sum());
    y.row(r).array() = scaled - lse;
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax_with_temperature(const Tensor<Scalar>& logits, Scalar temperature) {
  if (!(temperature > Scalar(0))) {
    throw ConfigError("softmax temperature must be positive, got " + std::to_string(temperature));
  }
  require(logits.rank() >= 1, "softmax: logits need at least one axis");
  const Index classes = logits.shape().back();
  const Index rows = logits.size() / classes;
  Tensor<Scalar> out(logits.shape());
  auto z = logits.matrix(rows, classes);
  auto p = out.matrix(rows, classes);
  for (Index r = 0; r < rows; ++r) {
    auto scaled = (z.row(r).array() / temperature).eval();
    auto e = (scaled - scaled.maxCoeff()).exp().eval();
    p.row(r).array() = e / e.sum();
  }
  return out;
}

template <typename Scalar>
std::vector<Scalar> row_entropy(const Tensor<Scalar>& probs) {
  const Index classes = probs.shape().back();
  const Index rows = probs.size() / classes;
  auto p = probs.matrix(rows, classes);
  std::vector<Scalar> h(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    Scalar acc = 0;
    for (Index c = 0; c < classes; ++c) {
      if (p(r, c) > Scalar(0)) acc -= p(r, c) * std::log(p(r, c));
    }
    h[static_cast<std::size_t>(r)] = acc;
  }
  return h;
}

template <typename Scalar>
Var<Scalar> log_softmax(Var<Scalar> x, Scalar temperature) {
  require(x.shape().size() == 2, "log_softmax: expected [B, G], got " + shape_string(x.shape()));
  Tensor<Scalar> out = log_softmax_with_temperature(x.value(), temperature);
  auto& graph = x.graph();
  const NodeId ix = x.id();
  const Index rows = x.shape()[0], classes = x.shape()[1];
  const NodeId self = graph.size();
  return graph.record(
      "log_softmax", {ix}, std::move(out),
      [&graph, ix, self, rows, classes, temperature](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
        auto* gx = grads.slot(ix);
        if (gx == nullptr) return;
        ConstMatMap<Scalar> dy(up.data(), rows, classes);
        auto y = graph.value(self).matrix(rows, classes);
        MatMap<Scalar> dx(gx->data(), rows, classes);
        for (Index r = 0; r < rows; ++r) {
          const Scalar total = dy.row(r).sum();
          dx.row(r).array() += (dy.row(r).array() - y.row(r).array().exp() * total) / temperature;
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Conv2dOptions options) {
  require_same_graph(x, weight, "conv2d");
  const auto& sx = x.shape();
  const auto& sw = weight.shape();
  require(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1],
          "conv2d: incompatible shapes x" + shape_string(sx) + " W" + shape_string(sw));
  require(options.stride > 0 && options.padding >= 0, "conv2d: stride must be positive, padding non-negative");
  ConvGeometry g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], options.stride, options.padding, 0, 0};
  require(g.height + 2 * g.padding >= g.kernel_h && g.width + 2 * g.padding >= g.kernel_w,
          "conv2d: kernel larger than padded input");
  g.out_h = (g.height + 2 * g.padding - g.kernel_h) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kernel_w) / g.stride + 1;

  Tensor<Scalar> out(Shape{g.batch, g.out_channels, g.out_h, g.out_w});
  RowMatrix<Scalar> col(g.patch(), g.out_pixels());
  auto w = weight.value().matrix(g.out_channels, g.patch());
  const Index in_stride = g.channels * g.height * g.width;
  const Index out_stride = g.out_channels * g.out_pixels();
  for (Index b = 0; b < g.batch; ++b) {
    im2col(x.value().data() + b * in_stride, g, col.data());
    MatMap<Scalar>(out.data() + b * out_stride, g.out_channels, g.out_pixels()).noalias() = w * col;
  }

  auto& graph = x.graph();
  const NodeId ix = x.id(), iw = weight.id();
  return graph.record(
      "conv2d", {ix, iw}, std::move(out),
      [&graph, ix, iw, g, in_stride, out_stride](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
        auto* gx = grads.slot(ix);
        auto* gw = grads.slot(iw);
        RowMatrix<Scalar> col(g.patch(), g.out_pixels());
        RowMatrix<Scalar> dcol(g.patch(), g.out_pixels());
        auto w = graph.value(iw).matrix(g.out_channels, g.patch());
        for (Index b = 0; b < g.batch; ++b) {
          ConstMatMap<Scalar> dy(up.data() + b * out_stride, g.out_channels, g.out_pixels());
          if (gw != nullptr) {
            im2col(graph.value(ix).data() + b * in_stride, g, col.data());
            MatMap<Scalar>(gw->data(), g.out_channels, g.patch()).noalias() += dy * col.transpose();
          }
          if (gx != nullptr) {
            dcol.noalias() = w.transpose() * dy;
            col2im(dcol.data(), g, gx->data() + b * in_stride);
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> avg_pool2d(Var<Scalar> x, Index kernel, Index stride) {
  const PoolGeometry g = pool_geometry(x.shape(), kernel, stride, "avg_pool2d");
  Tensor<Scalar> out(Shape{g.batch, g.channels, g.out_h, g.out_w});
  const Scalar inv = Scalar(1) / static_cast<Scalar>(kernel * kernel);
  const Scalar* in = x.value().data();
  Scalar* o = out.data();
  for (Index plane = 0; plane < g.batch * g.channels; ++plane) {
    const Scalar* src = in + plane * g.height * g.width;
    Scalar* dst = o + plane * g.out_h * g.out_w;
    for (Index oy = 0; oy < g.out_h; ++oy) {
      for (Index ox = 0; ox < g.out_w; ++ox) {
        Scalar acc = 0;
        for (Index i = 0; i < kernel; ++i)
          for (Index j = 0; j < kernel; ++j) acc += src[(oy * stride + i) * g.width + ox * stride + j];
        dst[oy * g.out_w + ox] = acc * inv;
      }
    }
  }
  const NodeId ix = x.id();
  return x.graph().record("avg_pool2d", {ix}, std::move(out),
                          [ix, g, inv](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            auto* gx = grads.slot(ix);
                            if (gx == nullptr) return;
                            for (Index plane = 0; plane < g.batch * g.channels; ++plane) {
                              Scalar* dst = gx->data() + plane * g.height * g.width;
                              const Scalar* src = up.data() + plane * g.out_h * g.out_w;
                              for (Index oy = 0; oy < g.out_h; ++oy)
                                for (Index ox = 0; ox < g.out_w; ++ox) {
                                  const Scalar d = src[oy * g.out_w + ox] * inv;
                                  for (Index i = 0; i < g.kernel; ++i)
                                    for (Index j = 0; j < g.kernel; ++j)
                                      dst[(oy * g.stride + i) * g.width + ox * g.stride + j] += d;
                                }
                            }
                          });
}

template <typename Scalar>
Var<Scalar> max_pool2d(Var<Scalar> x, Index kernel, Index stride) {
  const PoolGeometry g = pool_geometry(x.shape(), kernel, stride, "max_pool2d");
  Tensor<Scalar> out(Shape{g.batch, g.channels, g.out_h, g.out_w});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* in = x.value().data();
  for (Index plane = 0; plane < g.batch * g.channels; ++plane) {
    const Index base = plane * g.height * g.width;
    for (Index oy = 0; oy < g.out_h; ++oy) {
      for (Index ox = 0; ox < g.out_w; ++ox) {
        Index best = base + (oy * stride) * g.width + ox * stride;
        for (Index i = 0; i < kernel; ++i)
          for (Index j = 0; j < kernel; ++j) {
            const Index at = base + (oy * stride + i) * g.width + ox * stride + j;
            if (in[at] > in[best]) best = at;
          }
        const Index o = plane * g.out_h * g.out_w + oy * g.out_w + ox;
        out[o] = in[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  const NodeId ix = x.id();
  return x.graph().record("max_pool2d", {ix}, std::move(out),
                          [ix, argmax = std::move(argmax)](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            auto* gx = grads.slot(ix);
                            if (gx == nullptr) return;
                            for (std::size_t o = 0; o < argmax.size(); ++o) (*gx)[argmax[o]] += up[static_cast<Index>(o)];
                          });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(Var<Scalar> x) {
  const auto& s = x.shape();
  require(s.size() == 4, "global_avg_pool: expected [B, C, H, W], got " + shape_string(s));
  const Index planes = s[0] * s[1], area = s[2] * s[3];
  Tensor<Scalar> out(Shape{s[0], s[1]});
  out.values() = x.value().matrix(planes, area).rowwise().mean().array();
  const NodeId ix = x.id();
  return x.graph().record("global_avg_pool", {ix}, std::move(out),
                          [ix, planes, area](const ArrayOf<Scalar>& up, GradBuffer<Scalar>& grads) {
                            auto* gx = grads.slot(ix);
                            if (gx == nullptr) return;
                            MatMap<Scalar> dx(gx->data(), planes, area);
                            dx.colwise() += (up / static_cast<Scalar>(area)).matrix();
                          });
}

// ---------------------------------------------------------------------------
// Batch normalization

template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, const Tensor<Scalar>& running_mean,
                       const Tensor<Scalar>& running_var, bool training, Scalar eps,
                       BatchStats<Scalar>* batch_stats) {
  require_same_graph(x, gamma, "batch_norm");
  require_same_graph(x, beta, "batch_norm");
  const ChannelLayout l = channel_layout(x.shape());
  const Shape channel_shape{l.channels};
  require(gamma.shape() == channel_shape && beta.shape() == channel_shape &&
              running_mean.shape() == channel_shape && running_var.shape() == channel_shape,
          "batch_norm: per-channel parameters must have shape " + shape_string(channel_shape));
  const Index count = l.batch * l.spatial;

  ArrayOf<Scalar> mean(l.channels), var(l.channels);
  const Scalar* in = x.value().data();
  if (training) {
    mean.setZero();
    var.setZero();
    for (Index b = 0; b < l.batch; ++b)
      for (Index c = 0; c < l.channels; ++c) {
        const Scalar* p = in + (b * l.channels + c) * l.spatial;
        for (Index s = 0; s < l.spatial; ++s) mean[c] += p[s];
      }
    mean /= static_cast<Scalar>(count);
    for (Index b = 0; b < l.batch; ++b)
      for (Index c = 0; c < l.channels; ++c) {
        const Scalar* p = in + (b * l.channels + c) * l.spatial;
        for (Index s = 0; s < l.spatial; ++s) {
          const Scalar d = p[s] - mean[c];
          var[c] += d * d;
        }
      }
    var /= static_cast<Scalar>(count);
    if (batch_stats != nullptr) {
      batch_stats->mean = Tensor<Scalar>(channel_shape, mean);
      const Scalar correction = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : Scalar(1);
      batch_stats->unbiased_var = Tensor<Scalar>(channel_shape, var * correction);
    }
  } else {
    mean = running_mean.values();
    var = running_var.values();
  }
  const ArrayOf<Scalar> inv_std = (var + eps).rsqrt();

  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> out(x.shape());
  const auto& gv = gamma.value().values();
  const auto& bv = beta.value().values();
  for (Index b = 0; b < l.batch; ++b)
    for (Index c = 0; c < l.channels; ++c) {
      const Index base = (b * l.channels + c) * l.spatial;
      for (Index s = 0; s < l.spatial; ++s) {
        const Scalar h = (in[base + s] - mean[c]) * inv_std[c];
        xhat[base + s] = h;
        out[base + s] = gv[c] * h + bv[c];
      }
    }

  auto& graph = x.graph();
  const NodeId ix = x.id(), ig = gamma.id(), ib = beta.id();
  return graph.record(
      training ? "batch_norm_train" : "batch_norm_eval", {ix, ig, ib}, std::move(out),
      [&graph, ix, ig, ib, l, count, training, inv_std, xhat = std::move(xhat)](const ArrayOf<Scalar>& up,
                                                                                 GradBuffer<Scalar>& grads) {
        ArrayOf<Scalar> dbeta = ArrayOf<Scalar>::Zero(l.channels);
        ArrayOf<Scalar> dgamma = ArrayOf<Scalar>::Zero(l.channels);
        for (Index b = 0; b < l.batch; ++b)
          for (Index c = 0; c < l.channels; ++c) {
            const Index base = (b * l.channels + c) * l.spatial;
            for (Index s = 0; s < l.spatial; ++s) {
              dbeta[c] += up[base + s];
              dgamma[c] += up[base + s] * xhat[base + s];
            }
          }
        grads.add(ib, dbeta);
        grads.add(ig, dgamma);
        auto* gx = grads.slot(ix);
        if (gx == nullptr) return;
        const auto& gv = graph.value(ig).values();
        const Scalar n = static_cast<Scalar>(count);
        for (Index b = 0; b < l.batch; ++b)
          for (Index c = 0; c < l.channels; ++c) {
            const Index base = (b * l.channels + c) * l.spatial;
            const Scalar k = gv[c] * inv_std[c];
            for (Index s = 0; s < l.spatial; ++s) {
              if (training) {
                // dx = gamma*inv_std/N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
                (*gx)[base + s] += k / n * (n * up[base + s] - dbeta[c] - xhat[base + s] * dgamma[c]);
              } else {
                (*gx)[base + s] += k * up[base + s];
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------

#define SNAPDISTILL_INSTANTIATE(S)                                                                     \
  template class GradBuffer<S>;                                                                        \
  template class Graph<S>;                                                                             \
  template GradientMap<S> backward(const Graph<S>&, Var<S>);                                           \
  template Var<S> matmul(Var<S>, Var<S>);                                                              \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                      \
  template Var<S> add(Var<S>, Var<S>);                                                                 \
  template Var<S> mul(Var<S>, Var<S>);                                                                 \
  template Var<S> scale(Var<S>, S);                                                                    \
  template Var<S> add_scalar(Var<S>, S);                                                               \
  template Var<S> relu(Var<S>);                                                                        \
  template Var<S> reshape(Var<S>, Shape);                                                              \
  template Var<S> sum(Var<S>);                                                                         \
  template Var<S> weighted_sum(Var<S>, const Tensor<S>&);                                              \
  template Var<S> log_softmax(Var<S>, S);                                                              \
  template Var<S> conv2d(Var<S>, Var<S>, Conv2dOptions);                                               \
  template Var<S> avg_pool2d(Var<S>, Index, Index);                                                    \
  template Var<S> max_pool2d(Var<S>, Index, Index);                                                    \
  template Var<S> global_avg_pool(Var<S>);                                                             \
  template Var<S> batch_norm(Var<S>, Var<S>, Var<S>, const Tensor<S>&, const Tensor<S>&, bool, S,      \
                             BatchStats<S>*);                                                          \
  template Tensor<S> softmax_with_temperature(const Tensor<S>&, S);                                    \
  template Tensor<S> log_softmax_with_temperature(const Tensor<S>&, S);                                \
  template std::vector<S> row_entropy(const Tensor<S>&);

SNAPDISTILL_INSTANTIATE(float)
SNAPDISTILL_INSTANTIATE(double)

#undef SNAPDISTILL_INSTANTIATE

}  // namespace snapdistill
