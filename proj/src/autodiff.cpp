#include "npad/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "npad/errors.hpp"

namespace npad {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

void add_into(std::span<double> dst, std::span<const double> src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

std::size_t resolve_padding(int padding, std::size_t kernel) {
    return padding < 0 ? (kernel - 1) / 2 : static_cast<std::size_t>(padding);
}

struct ConvGeometry {
    std::size_t batch, channels, height, width;
    std::size_t out_channels, kh, kw;
    std::size_t stride, pad;
    std::size_t out_h, out_w;

    std::size_t patch() const { return channels * kh * kw; }
    std::size_t out_area() const { return out_h * out_w; }
};

// cols is [C*KH*KW] x [B*OH*OW], column index = b*OH*OW + oy*OW + ox.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
    const std::size_t ncols = g.batch * g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const double* plane = x + (b * g.channels + c) * g.height * g.width;
                    double* dst = row + b * g.out_area();
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.height)) {
                            std::fill(dst + oy * g.out_w, dst + (oy + 1) * g.out_w, 0.0);
                            continue;
                        }
                        const double* src = plane + iy * g.width;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                            dst[oy * g.out_w + ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : src[ix];
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
    const std::size_t ncols = g.batch * g.out_area();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = cols + ((c * g.kh + ky) * g.kw + kx) * ncols;
                for (std::size_t b = 0; b < g.batch; ++b) {
                    double* plane = dx + (b * g.channels + c) * g.height * g.width;
                    const double* src = row + b * g.out_area();
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                        double* dst = plane + iy * g.width;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(std::string name, Tensor value) {
    if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor grad(value.shape(), 0.0);
    params_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), true});
    return params_.back();
}

Parameter& ParameterSet::get(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return p;
    }
    throw IndexError("unknown parameter '" + name + "'");
}

const Parameter& ParameterSet::get(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p;
    }
    throw IndexError("unknown parameter '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

void ParameterSet::set_trainable(bool trainable) {
    for (auto& p : params_) p.trainable = trainable;
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

// ---------------------------------------------------------------------------
// Graph bookkeeping

Graph::Node& Graph::node(Var v) {
    if (v.id >= nodes_.size()) throw StateError("variable does not belong to the current tape");
    return nodes_[v.id];
}

const Graph::Node& Graph::node(Var v) const {
    if (v.id >= nodes_.size()) throw StateError("variable does not belong to the current tape");
    return nodes_[v.id];
}

Var Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

bool Graph::any_requires_grad(std::initializer_list<Var> vs) const {
    return std::any_of(vs.begin(), vs.end(), [&](Var v) { return node(v).requires_grad; });
}

const Tensor& Graph::value(Var v) const { return node(v).value; }
const Tensor& Graph::grad_of(std::size_t id) const { return nodes_.at(id).grad; }
const Tensor& Graph::value_of(std::size_t id) const { return nodes_.at(id).value; }
const std::vector<std::size_t>& Graph::inputs_of(std::size_t id) const { return nodes_.at(id).inputs; }
bool Graph::needs_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

double* Graph::grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad.raw();
}

void Graph::accumulate_grad(std::size_t id, std::span<const double> g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (g.size() != n.value.size()) throw DimensionError("gradient size does not match node value");
    add_into(std::span<double>(grad_buffer(id), n.value.size()), g);
}

void Graph::clear() { nodes_.clear(); }

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::parameter(Parameter& p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = p.trainable;
    return push(std::move(n));
}

Var Graph::custom(std::vector<Var> inputs, Tensor value, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    for (Var v : inputs) {
        n.inputs.push_back(v.id);
        n.requires_grad = n.requires_grad || node(v).requires_grad;
    }
    n.backward = std::move(backward);
    return push(std::move(n));
}

void Graph::backward(Var loss) {
    if (nodes_.empty() || loss.id >= nodes_.size()) {
        throw StateError("backward called without a recorded forward pass");
    }
    Node& root = nodes_[loss.id];
    if (root.value.size() != 1) {
        throw DimensionError("backward requires a scalar loss, got shape " + shape_to_string(root.value.shape()));
    }
    if (root.requires_grad) {
        grad_buffer(loss.id)[0] = 1.0;
        // Node ids are already a topological order: inputs are always created first.
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.param != nullptr) {
                add_into(n.param->grad.data(), n.grad.data());
            } else if (n.backward) {
                n.backward(*this, i);
            }
        }
    }
    clear();
}

// ---------------------------------------------------------------------------
// Operations

Var Graph::dense(Var x, Var w, Var b) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    if (xv.rank() != 2 || wv.rank() != 2) {
        throw DimensionError("dense expects x[batch x in] and W[in x out], got " + shape_to_string(xv.shape()) +
                             " and " + shape_to_string(wv.shape()));
    }
    if (xv.dim(1) != wv.dim(0)) {
        throw DimensionError("dense: x axis 1 (" + std::to_string(xv.dim(1)) + ") != W axis 0 (" +
                             std::to_string(wv.dim(0)) + ")");
    }
    if (bv.size() != wv.dim(1)) {
        throw DimensionError("dense: bias length " + std::to_string(bv.size()) + " != W axis 1 (" +
                             std::to_string(wv.dim(1)) + ")");
    }
    const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
    Tensor y({batch, out});
    MatMap ym(y.raw(), batch, out);
    ym.noalias() = ConstMatMap(xv.raw(), batch, in) * ConstMatMap(wv.raw(), in, out);
    for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t c = 0; c < out; ++c) y[r * out + c] += bv[c];
    }

    Node n;
    n.value = std::move(y);
    n.inputs = {x.id, w.id, b.id};
    n.requires_grad = any_requires_grad({x, w, b});
    n.backward = [batch, in, out](Graph& g, std::size_t id) {
        const auto& ins = g.inputs_of(id);
        ConstMatMap gy(g.grad_of(id).raw(), batch, out);
        if (g.needs_grad(ins[0])) {
            MatMap gx(g.grad_buffer(ins[0]), batch, in);
            gx.noalias() += gy * ConstMatMap(g.value_of(ins[1]).raw(), in, out).transpose();
        }
        if (g.needs_grad(ins[1])) {
            MatMap gw(g.grad_buffer(ins[1]), in, out);
            gw.noalias() += ConstMatMap(g.value_of(ins[0]).raw(), batch, in).transpose() * gy;
        }
        if (g.needs_grad(ins[2])) {
            double* gb = g.grad_buffer(ins[2]);
            for (std::size_t r = 0; r < batch; ++r) {
                for (std::size_t c = 0; c < out; ++c) gb[c] += gy(r, c);
            }
        }
    };
    return push(std::move(n));
}

Var Graph::conv2d(Var x, Var filters, Conv2dOptions opts) {
    const Tensor& fv = value(filters);
    if (fv.rank() != 4) throw DimensionError("conv2d filters must be [out x in x kh x kw]");
    return conv2d(x, filters, constant(Tensor({fv.dim(0)}, 0.0)), opts);
}

Var Graph::conv2d(Var x, Var filters, Var bias, Conv2dOptions opts) {
    if (opts.stride == 0) throw ConfigError("conv2d stride must be >= 1");
    const Tensor& xv = value(x);
    const Tensor& fv = value(filters);
    if (xv.rank() != 4 || fv.rank() != 4) {
        throw DimensionError("conv2d expects x[batch x C x H x W] and filters[out x C x kh x kw], got " +
                             shape_to_string(xv.shape()) + " and " + shape_to_string(fv.shape()));
    }
    if (xv.dim(1) != fv.dim(1)) {
        throw DimensionError("conv2d: input channels (" + std::to_string(xv.dim(1)) + ") != filter channels (" +
                             std::to_string(fv.dim(1)) + ")");
    }
    if (value(bias).size() != fv.dim(0)) throw DimensionError("conv2d: bias length must equal filter count");

    ConvGeometry geo{};
    geo.batch = xv.dim(0);
    geo.channels = xv.dim(1);
    geo.height = xv.dim(2);
    geo.width = xv.dim(3);
    geo.out_channels = fv.dim(0);
    geo.kh = fv.dim(2);
    geo.kw = fv.dim(3);
    geo.stride = opts.stride;
    geo.pad = resolve_padding(opts.padding, std::max(geo.kh, geo.kw));
    if (geo.kh > geo.height + 2 * geo.pad || geo.kw > geo.width + 2 * geo.pad) {
        throw DimensionError("conv2d: kernel " + std::to_string(geo.kh) + "x" + std::to_string(geo.kw) +
                             " larger than padded input " + std::to_string(geo.height + 2 * geo.pad) + "x" +
                             std::to_string(geo.width + 2 * geo.pad));
    }
    geo.out_h = (geo.height + 2 * geo.pad - geo.kh) / geo.stride + 1;
    geo.out_w = (geo.width + 2 * geo.pad - geo.kw) / geo.stride + 1;

    const std::size_t ncols = geo.batch * geo.out_area();
    std::vector<double> cols(geo.patch() * ncols);
    im2col(geo, xv.raw(), cols.data());

    // [O x B*OH*OW] then scatter to [B x O x OH x OW].
    RowMatrix prod = ConstMatMap(fv.raw(), geo.out_channels, geo.patch()) * ConstMatMap(cols.data(), geo.patch(), ncols);
    Tensor y({geo.batch, geo.out_channels, geo.out_h, geo.out_w});
    const Tensor& bv = value(bias);
    for (std::size_t o = 0; o < geo.out_channels; ++o) {
        for (std::size_t b = 0; b < geo.batch; ++b) {
            const double* src = prod.data() + o * ncols + b * geo.out_area();
            double* dst = y.raw() + (b * geo.out_channels + o) * geo.out_area();
            for (std::size_t i = 0; i < geo.out_area(); ++i) dst[i] = src[i] + bv[o];
        }
    }

    Node n;
    n.value = std::move(y);
    n.inputs = {x.id, filters.id, bias.id};
    n.requires_grad = any_requires_grad({x, filters, bias});
    if (n.requires_grad) n.saved = std::move(cols);
    n.backward = [geo, ncols](Graph& g, std::size_t id) {
        const auto& ins = g.inputs_of(id);
        const Tensor& gy = g.grad_of(id);
        RowMatrix gmat(geo.out_channels, ncols);
        for (std::size_t o = 0; o < geo.out_channels; ++o) {
            for (std::size_t b = 0; b < geo.batch; ++b) {
                const double* src = gy.raw() + (b * geo.out_channels + o) * geo.out_area();
                std::copy(src, src + geo.out_area(), gmat.data() + o * ncols + b * geo.out_area());
            }
        }
        const std::vector<double>& cols = g.nodes_[id].saved;
        if (g.needs_grad(ins[1])) {
            MatMap gw(g.grad_buffer(ins[1]), geo.out_channels, geo.patch());
            gw.noalias() += gmat * ConstMatMap(cols.data(), geo.patch(), ncols).transpose();
        }
        if (g.needs_grad(ins[2])) {
            double* gb = g.grad_buffer(ins[2]);
            for (std::size_t o = 0; o < geo.out_channels; ++o) gb[o] += gmat.row(o).sum();
        }
        if (g.needs_grad(ins[0])) {
            RowMatrix gcols = ConstMatMap(g.value_of(ins[1]).raw(), geo.out_channels, geo.patch()).transpose() * gmat;
            col2im_add(geo, gcols.data(), g.grad_buffer(ins[0]));
        }
    };
    return push(std::move(n));
}

Var Graph::relu(Var x) {
    const Tensor& xv = value(x);
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    Node n;
    n.value = std::move(y);
    n.inputs = {x.id};
    n.requires_grad = node(x).requires_grad;
    n.backward = [](Graph& g, std::size_t id) {
        const std::size_t in = g.inputs_of(id)[0];
        const Tensor& yv = g.value_of(id);
        const Tensor& gy = g.grad_of(id);
        double* gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < yv.size(); ++i) {
            if (yv[i] > 0.0) gx[i] += gy[i];
        }
    };
    return push(std::move(n));
}

Var Graph::max_pool2d(Var x, std::size_t window) {
    const Tensor& xv = value(x);
    if (xv.rank() != 4) throw DimensionError("max_pool2d expects [batch x C x H x W]");
    if (window == 0 || window > xv.dim(2) || window > xv.dim(3)) {
        throw DimensionError("max_pool2d window " + std::to_string(window) + " does not fit input " +
                             shape_to_string(xv.shape()));
    }
    const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    Tensor y({xv.dim(0), xv.dim(1), oh, ow});
    std::vector<std::size_t> arg(y.size());
    for (std::size_t p = 0; p < planes; ++p) {
        const double* plane = xv.raw() + p * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (oy * window) * w + ox * window;
                for (std::size_t dy = 0; dy < window; ++dy) {
                    for (std::size_t dx = 0; dx < window; ++dx) {
                        const std::size_t idx = (oy * window + dy) * w + ox * window + dx;
                        if (plane[idx] > plane[best]) best = idx;
                    }
                }
                const std::size_t o = (p * oh + oy) * ow + ox;
                y[o] = plane[best];
                arg[o] = p * h * w + best;
            }
        }
    }
    Node n;
    n.value = std::move(y);
    n.inputs = {x.id};
    n.requires_grad = node(x).requires_grad;
    n.saved_index = std::move(arg);
    n.backward = [](Graph& g, std::size_t id) {
        const std::size_t in = g.inputs_of(id)[0];
        const Tensor& gy = g.grad_of(id);
        const auto& arg = g.nodes_[id].saved_index;
        double* gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += gy[i];
    };
    return push(std::move(n));
}

Var Graph::flatten(Var x) {
    const Tensor& xv = value(x);
    if (xv.rank() < 1) throw DimensionError("flatten of a rank-0 tensor");
    const std::size_t batch = xv.dim(0);
    Node n;
    n.value = xv.reshaped({batch, batch ? xv.size() / batch : 0});
    n.inputs = {x.id};
    n.requires_grad = node(x).requires_grad;
    n.backward = [](Graph& g, std::size_t id) { g.accumulate_grad(g.inputs_of(id)[0], g.grad_of(id).data()); };
    return push(std::move(n));
}

Var Graph::softmax_cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor& lv = value(logits);
    if (lv.rank() != 2) throw DimensionError("softmax_cross_entropy expects logits[batch x classes]");
    const std::size_t batch = lv.dim(0), classes = lv.dim(1);
    if (labels.size() != batch) {
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(batch));
    }
    if (batch == 0) throw DimensionError("softmax_cross_entropy on an empty batch");
    std::vector<double> probs(lv.size());
    double loss = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
        }
        const double* row = lv.raw() + r * classes;
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
        for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - mx) / z;
        loss += -(row[label] - mx - std::log(z));
    }
    loss /= static_cast<double>(batch);

    Node n;
    n.value = Tensor::scalar(loss);
    n.inputs = {logits.id};
    n.requires_grad = node(logits).requires_grad;
    n.saved = std::move(probs);
    n.saved_index.assign(labels.begin(), labels.end());
    n.backward = [batch, classes](Graph& g, std::size_t id) {
        const double gl = g.grad_of(id)[0] / static_cast<double>(batch);
        const Node& self = g.nodes_[id];
        double* gx = g.grad_buffer(g.inputs_of(id)[0]);
        for (std::size_t r = 0; r < batch; ++r) {
            for (std::size_t c = 0; c < classes; ++c) {
                const double onehot = (c == self.saved_index[r]) ? 1.0 : 0.0;
                gx[r * classes + c] += gl * (self.saved[r * classes + c] - onehot);
            }
        }
    };
    return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape() != bv.shape()) {
        throw DimensionError("add: shapes " + shape_to_string(av.shape()) + " and " + shape_to_string(bv.shape()));
    }
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
    Node n;
    n.value = std::move(y);
    n.inputs = {a.id, b.id};
    n.requires_grad = any_requires_grad({a, b});
    n.backward = [](Graph& g, std::size_t id) {
        for (std::size_t in : g.inputs_of(id)) g.accumulate_grad(in, g.grad_of(id).data());
    };
    return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.shape() != bv.shape()) {
        throw DimensionError("mul: shapes " + shape_to_string(av.shape()) + " and " + shape_to_string(bv.shape()));
    }
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    Node n;
    n.value = std::move(y);
    n.inputs = {a.id, b.id};
    n.requires_grad = any_requires_grad({a, b});
    n.backward = [](Graph& g, std::size_t id) {
        const auto ins = g.inputs_of(id);
        const Tensor& gy = g.grad_of(id);
        for (int side = 0; side < 2; ++side) {
            if (!g.needs_grad(ins[side])) continue;
            const Tensor& other = g.value_of(ins[1 - side]);
            double* gx = g.grad_buffer(ins[side]);
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * other[i];
        }
    };
    return push(std::move(n));
}

Var Graph::scale(Var a, double factor) {
    const Tensor& av = value(a);
    Tensor y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * factor;
    Node n;
    n.value = std::move(y);
    n.inputs = {a.id};
    n.requires_grad = node(a).requires_grad;
    n.backward = [factor](Graph& g, std::size_t id) {
        const Tensor& gy = g.grad_of(id);
        double* gx = g.grad_buffer(g.inputs_of(id)[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
    };
    return push(std::move(n));
}

Var Graph::square(Var a) { return mul(a, a); }

Var Graph::sum(Var a) {
    const Tensor& av = value(a);
    double s = 0.0;
    for (double v : av.data()) s += v;
    Node n;
    n.value = Tensor::scalar(s);
    n.inputs = {a.id};
    n.requires_grad = node(a).requires_grad;
    n.backward = [](Graph& g, std::size_t id) {
        const std::size_t in = g.inputs_of(id)[0];
        const double gs = g.grad_of(id)[0];
        double* gx = g.grad_buffer(in);
        for (std::size_t i = 0; i < g.value_of(in).size(); ++i) gx[i] += gs;
    };
    return push(std::move(n));
}

// ---------------------------------------------------------------------------

double grad_check(ParameterSet& params, const std::function<Var(Graph&)>& build, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3)) throw ConfigError("grad_check: perturbation must lie in (0, 1e-3]");

    params.zero_grad();
    {
        Graph g;
        Var loss = build(g);
        if (!std::isfinite(g.value(loss)[0])) throw NumericError("grad_check: non-finite loss at base point");
        g.backward(loss);
    }

    auto evaluate = [&]() {
        Graph g;
        const double v = g.value(build(g))[0];
        if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss during perturbation");
        return v;
    };

    double worst = 0.0;
    for (auto& p : params) {
        if (!p.trainable) continue;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            p.value[i] = orig + eps;
            const double up = evaluate();
            p.value[i] = orig - eps;
            const double down = evaluate();
            p.value[i] = orig;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = p.grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    params.zero_grad();
    return worst;
}

}  // namespace npad
