#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctseg/tensor.hpp"

// Reverse-mode autodiff on a per-forward tape. Feature maps are (C,D,H,W).
// Ops append a backward closure to the graph; Graph::backward() runs the
// tape in reverse creation order, which is a valid topological order.
// Everything is single-threaded and runs in a fixed order, so a given seed
// reproduces training bit-for-bit.
namespace ctseg::nn {

using ctseg::Tensor;

template <typename T>
struct Act {
    Tensor<T> val;
    Tensor<T> grad;  // allocated only while recording
};

// Trainable leaf. Grads persist across graphs and accumulate until cleared.
template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, std::vector<int> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

template <typename T>
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    Act<T>& make(std::vector<int> shape) {
        acts_.emplace_back();
        acts_.back().val = Tensor<T>(shape);
        if (record_) {
            acts_.back().grad = Tensor<T>(std::move(shape));
        }
        return acts_.back();
    }

    Act<T>& leaf(const Tensor<T>& value) {
        Act<T>& a = make(value.shape());
        a.val = value;
        return a;
    }

    void tape(std::function<void()> fn) {
        if (record_) tape_.push_back(std::move(fn));
    }

    void backward() {
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

private:
    bool record_;
    std::deque<Act<T>> acts_;  // deque: stable addresses for tape closures
    std::vector<std::function<void()>> tape_;
};

// ---- 3x3x3 convolution, padding 1, stride 1 or 2 --------------------------

namespace detail {

inline int conv_out_dim(int n, int stride) { return (n - 1) / stride + 1; }  // == ceil(n/s)

// Valid output range [lo, hi] for one axis and kernel offset k in {0,1,2}:
// input index = s*o + k - 1 must land in [0, n).
inline void tap_bounds(int n, int n_out, int s, int k, int& lo, int& hi) {
    lo = std::max(0, (1 - k + s - 1) / s);
    hi = (n - k >= 0) ? std::min(n_out - 1, (n - k) / s) : -1;
}

}  // namespace detail

namespace detail {

// Input copied once into a buffer with a one-voxel zero halo; the hot loops
// then run without bounds checks. One extra trailing plane per channel keeps
// the shifted flat passes (offset up to 2*plane + 2*row + 2) inside the
// allocation; the slack is zero so it never contributes.
template <typename T>
Tensor<T> pad_halo(const Tensor<T>& in) {
    const int ci = in.dim(0), d = in.dim(1), h = in.dim(2), wd = in.dim(3);
    Tensor<T> pad({ci, d + 3, h + 2, wd + 2});
    for (int ic = 0; ic < ci; ++ic)
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y) {
                const T* src = in.data() + ((size_t(ic) * d + z) * h + y) * wd;
                T* dst = pad.data() +
                         ((size_t(ic) * (d + 3) + z + 1) * (h + 2) + y + 1) * (wd + 2) + 1;
                std::copy(src, src + wd, dst);
            }
    return pad;
}

constexpr int kConvRowMax = 1024;

}  // namespace detail

// Stride-1 fast path. A kernel tap (kz,ky,kx) is a constant flat offset in
// the halo-padded layout, so each tap is one long shifted fused
// multiply-add over the whole channel volume. The pass also touches the
// y/x halo lanes; that garbage never leaves the scratch buffer.
template <typename T>
void conv3d_fwd_s1(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b,
                   Tensor<T>& out) {
    const int ci = in.dim(0), d = in.dim(1), h = in.dim(2), wd = in.dim(3);
    const int co = w.dim(0);
    const Tensor<T> pad = detail::pad_halo(in);
    const size_t pzs = size_t(h + 2) * (wd + 2);
    const size_t pcs = size_t(d + 3) * pzs;
    const size_t span = size_t(d) * pzs;  // accumulation region incl. halo lanes

    std::vector<T> buf(span);
    for (int oc = 0; oc < co; ++oc) {
        std::fill(buf.begin(), buf.end(), b[size_t(oc)]);
        const T* wt_oc = w.data() + size_t(oc) * ci * 27;
        for (int ic = 0; ic < ci; ++ic) {
            const T* base = pad.data() + size_t(ic) * pcs;
            const T* wt = wt_oc + size_t(ic) * 27;
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky) {
                    const T w0 = wt[(kz * 3 + ky) * 3 + 0];
                    const T w1 = wt[(kz * 3 + ky) * 3 + 1];
                    const T w2 = wt[(kz * 3 + ky) * 3 + 2];
                    if (w0 == T(0) && w1 == T(0) && w2 == T(0)) continue;
                    const T* src = base + size_t(kz) * pzs + size_t(ky) * (wd + 2);
                    T* dst = buf.data();
                    for (size_t i = 0; i < span; ++i)
                        dst[i] += w0 * src[i] + w1 * src[i + 1] + w2 * src[i + 2];
                }
        }
        T* outc = out.data() + size_t(oc) * d * h * wd;
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
                std::copy(buf.data() + size_t(z) * pzs + size_t(y) * (wd + 2),
                          buf.data() + size_t(z) * pzs + size_t(y) * (wd + 2) + wd,
                          outc + (size_t(z) * h + y) * wd);
    }
}

template <typename T>
void conv3d_bwd_s1(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& gout,
                   Tensor<T>* gin, Tensor<T>& gw, Tensor<T>& gb) {
    const int ci = in.dim(0), d = in.dim(1), h = in.dim(2), wd = in.dim(3);
    const int co = w.dim(0);
    const Tensor<T> pad = detail::pad_halo(in);
    const size_t pzs = size_t(h + 2) * (wd + 2);
    const size_t pcs = size_t(d + 3) * pzs;
    const size_t span = size_t(d) * pzs;

    Tensor<T> gpad({ci, d + 3, h + 2, wd + 2});
    std::vector<T> gbuf(span);  // gout staged with zeroed halo lanes

    for (int oc = 0; oc < co; ++oc) {
        const T* gc = gout.data() + size_t(oc) * d * h * wd;
        T bsum = 0;
        for (size_t i = 0; i < size_t(d) * h * wd; ++i) bsum += gc[i];
        gb[size_t(oc)] += bsum;

        std::fill(gbuf.begin(), gbuf.end(), T(0));
        for (int z = 0; z < d; ++z)
            for (int y = 0; y < h; ++y)
                std::copy(gc + (size_t(z) * h + y) * wd, gc + (size_t(z) * h + y) * wd + wd,
                          gbuf.data() + size_t(z) * pzs + size_t(y) * (wd + 2));

        const T* wt_oc = w.data() + size_t(oc) * ci * 27;
        T* gwt_oc = gw.data() + size_t(oc) * ci * 27;
        for (int ic = 0; ic < ci; ++ic) {
            const T* base = pad.data() + size_t(ic) * pcs;
            T* gbase = gin ? gpad.data() + size_t(ic) * pcs : nullptr;
            const T* wt = wt_oc + size_t(ic) * 27;
            T* gwt = gwt_oc + size_t(ic) * 27;
            for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky) {
                    const size_t off = size_t(kz) * pzs + size_t(ky) * (wd + 2);
                    const T* g = gbuf.data();
                    // lane-split reductions keep the dot products
                    // vectorizable under strict FP semantics
                    constexpr size_t VL = 8;
                    for (int kx = 0; kx < 3; ++kx) {
                        const T* src = base + off + kx;
                        T lanes[VL] = {};
                        size_t i = 0;
                        for (; i + VL <= span; i += VL)
                            for (size_t v = 0; v < VL; ++v) lanes[v] += g[i + v] * src[i + v];
                        for (; i < span; ++i) lanes[0] += g[i] * src[i];
                        T dw = 0;
                        for (size_t v = 0; v < VL; ++v) dw += lanes[v];
                        gwt[(kz * 3 + ky) * 3 + kx] += dw;
                    }

                    if (gbase) {
                        T* dst = gbase + off;
                        const T w0 = wt[(kz * 3 + ky) * 3 + 0];
                        const T w1 = wt[(kz * 3 + ky) * 3 + 1];
                        const T w2 = wt[(kz * 3 + ky) * 3 + 2];
                        if (w0 != T(0))
                            for (size_t j = 0; j < span; ++j) dst[j] += w0 * g[j];
                        if (w1 != T(0))
                            for (size_t j = 0; j < span; ++j) dst[j + 1] += w1 * g[j];
                        if (w2 != T(0))
                            for (size_t j = 0; j < span; ++j) dst[j + 2] += w2 * g[j];
                    }
                }
        }
    }

    if (gin)
        for (int ic = 0; ic < ci; ++ic)
            for (int z = 0; z < d; ++z)
                for (int y = 0; y < h; ++y) {
                    const T* src = gpad.data() + size_t(ic) * pcs + size_t(z + 1) * pzs +
                                   size_t(y + 1) * (wd + 2) + 1;
                    T* dst = gin->data() + ((size_t(ic) * d + z) * h + y) * wd;
                    for (int x = 0; x < wd; ++x) dst[x] += src[x];
                }
}

template <typename T>
void conv3d_fwd(const Tensor<T>& in, const Tensor<T>& w, const Tensor<T>& b, int stride,
                Tensor<T>& out) {
    const int ci = in.dim(0), d = in.dim(1), h = in.dim(2), wd = in.dim(3);
    const int co = w.dim(0);
    const int od = out.dim(1), oh = out.dim(2), ow = out.dim(3);

    if (stride == 1 && wd < detail::kConvRowMax) {
        conv3d_fwd_s1(in, w, b, out);
        return;
    }

    for (int oc = 0; oc < co; ++oc) {
        T* outc = out.data() + size_t(oc) * od * oh * ow;
        std::fill(outc, outc + size_t(od) * oh * ow, b[size_t(oc)]);
        for (int ic = 0; ic < ci; ++ic) {
            const T* inc = in.data() + size_t(ic) * d * h * wd;
            const T* wt = w.data() + (size_t(oc) * ci + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
                int zlo, zhi;
                detail::tap_bounds(d, od, stride, kz, zlo, zhi);
                for (int ky = 0; ky < 3; ++ky) {
                    int ylo, yhi;
                    detail::tap_bounds(h, oh, stride, ky, ylo, yhi);
                    for (int kx = 0; kx < 3; ++kx) {
                        int xlo, xhi;
                        detail::tap_bounds(wd, ow, stride, kx, xlo, xhi);
                        if (xhi < xlo) continue;
                        const T wv = wt[(kz * 3 + ky) * 3 + kx];
                        if (wv == T(0)) continue;
                        for (int z = zlo; z <= zhi; ++z) {
                            const T* inz = inc + size_t(z * stride + kz - 1) * h * wd;
                            T* outz = outc + size_t(z) * oh * ow;
                            for (int y = ylo; y <= yhi; ++y) {
                                const T* row = inz + size_t(y * stride + ky - 1) * wd + (kx - 1);
                                T* orow = outz + size_t(y) * ow;
                                if (stride == 1) {
                                    for (int x = xlo; x <= xhi; ++x) orow[x] += wv * row[x];
                                } else {
                                    for (int x = xlo; x <= xhi; ++x) orow[x] += wv * row[x * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_bwd(const Tensor<T>& in, const Tensor<T>& w, int stride, const Tensor<T>& gout,
                Tensor<T>* gin, Tensor<T>& gw, Tensor<T>& gb) {
    const int ci = in.dim(0), d = in.dim(1), h = in.dim(2), wd = in.dim(3);
    const int co = w.dim(0);
    const int od = gout.dim(1), oh = gout.dim(2), ow = gout.dim(3);

    if (stride == 1 && wd < detail::kConvRowMax) {
        conv3d_bwd_s1(in, w, gout, gin, gw, gb);
        return;
    }

    for (int oc = 0; oc < co; ++oc) {
        const T* gc = gout.data() + size_t(oc) * od * oh * ow;
        T bsum = 0;
        for (size_t i = 0; i < size_t(od) * oh * ow; ++i) bsum += gc[i];
        gb[size_t(oc)] += bsum;

        for (int ic = 0; ic < ci; ++ic) {
            const T* inc = in.data() + size_t(ic) * d * h * wd;
            T* ginc = gin ? gin->data() + size_t(ic) * d * h * wd : nullptr;
            const T* wt = w.data() + (size_t(oc) * ci + ic) * 27;
            T* gwt = gw.data() + (size_t(oc) * ci + ic) * 27;
            for (int kz = 0; kz < 3; ++kz) {
                int zlo, zhi;
                detail::tap_bounds(d, od, stride, kz, zlo, zhi);
                for (int ky = 0; ky < 3; ++ky) {
                    int ylo, yhi;
                    detail::tap_bounds(h, oh, stride, ky, ylo, yhi);
                    for (int kx = 0; kx < 3; ++kx) {
                        int xlo, xhi;
                        detail::tap_bounds(wd, ow, stride, kx, xlo, xhi);
                        if (xhi < xlo) continue;
                        const T wv = wt[(kz * 3 + ky) * 3 + kx];
                        T wacc = 0;
                        for (int z = zlo; z <= zhi; ++z) {
                            const T* inz = inc + size_t(z * stride + kz - 1) * h * wd;
                            T* ginz =
                                ginc ? ginc + size_t(z * stride + kz - 1) * h * wd : nullptr;
                            const T* gz = gc + size_t(z) * oh * ow;
                            for (int y = ylo; y <= yhi; ++y) {
                                const size_t roff = size_t(y * stride + ky - 1) * wd + (kx - 1);
                                const T* row = inz + roff;
                                const T* grow = gz + size_t(y) * ow;
                                if (stride == 1) {
                                    for (int x = xlo; x <= xhi; ++x) wacc += grow[x] * row[x];
                                    if (ginz) {
                                        T* gr = ginz + roff;
                                        for (int x = xlo; x <= xhi; ++x) gr[x] += wv * grow[x];
                                    }
                                } else {
                                    for (int x = xlo; x <= xhi; ++x)
                                        wacc += grow[x] * row[x * stride];
                                    if (ginz) {
                                        T* gr = ginz + roff;
                                        for (int x = xlo; x <= xhi; ++x)
                                            gr[x * stride] += wv * grow[x];
                                    }
                                }
                            }
                        }
                        gwt[(kz * 3 + ky) * 3 + kx] += wacc;
                    }
                }
            }
        }
    }
}

template <typename T>
Act<T>& conv3d(Graph<T>& g, Act<T>& x, Param<T>& w, Param<T>& b, int stride = 1) {
    if (x.val.rank() != 4 || w.value.rank() != 5)
        throw ShapeError("conv3d: expected (C,D,H,W) input and (O,I,3,3,3) weights");
    if (w.value.dim(1) != x.val.dim(0))
        throw ShapeError("conv3d " + w.name + ": input channels " + std::to_string(x.val.dim(0)) +
                         " != weight fan-in " + std::to_string(w.value.dim(1)));
    Act<T>& y = g.make({w.value.dim(0), detail::conv_out_dim(x.val.dim(1), stride),
                        detail::conv_out_dim(x.val.dim(2), stride),
                        detail::conv_out_dim(x.val.dim(3), stride)});
    conv3d_fwd(x.val, w.value, b.value, stride, y.val);
    g.tape([&x, &w, &b, &y, stride] {
        conv3d_bwd(x.val, w.value, stride, y.grad, &x.grad, w.grad, b.grad);
    });
    return y;
}

// 1x1x1 convolution: channel mixing only.
template <typename T>
Act<T>& conv1x1(Graph<T>& g, Act<T>& x, Param<T>& w, Param<T>& b) {
    const int ci = x.val.dim(0);
    const int co = w.value.dim(0);
    if (w.value.dim(1) != ci) throw ShapeError("conv1x1 " + w.name + ": channel mismatch");
    const size_t vox = x.val.numel() / size_t(ci);
    Act<T>& y = g.make({co, x.val.dim(1), x.val.dim(2), x.val.dim(3)});
    for (int oc = 0; oc < co; ++oc) {
        T* yc = y.val.data() + size_t(oc) * vox;
        std::fill(yc, yc + vox, b.value[size_t(oc)]);
        for (int ic = 0; ic < ci; ++ic) {
            const T wv = w.value[size_t(oc) * ci + ic];
            const T* xc = x.val.data() + size_t(ic) * vox;
            for (size_t i = 0; i < vox; ++i) yc[i] += wv * xc[i];
        }
    }
    g.tape([&x, &w, &b, &y, ci, co, vox] {
        for (int oc = 0; oc < co; ++oc) {
            const T* gy = y.grad.data() + size_t(oc) * vox;
            T bsum = 0;
            for (size_t i = 0; i < vox; ++i) bsum += gy[i];
            b.grad[size_t(oc)] += bsum;
            for (int ic = 0; ic < ci; ++ic) {
                const T* xc = x.val.data() + size_t(ic) * vox;
                T* gx = x.grad.data() + size_t(ic) * vox;
                const T wv = w.value[size_t(oc) * ci + ic];
                T wacc = 0;
                for (size_t i = 0; i < vox; ++i) {
                    wacc += gy[i] * xc[i];
                    gx[i] += wv * gy[i];
                }
                w.grad[size_t(oc) * ci + ic] += wacc;
            }
        }
    });
    return y;
}

// Instance norm: per-channel mean/var over the spatial dims of one sample.
template <typename T>
Act<T>& instance_norm(Graph<T>& g, Act<T>& x, Param<T>& gamma, Param<T>& beta,
                      T eps = T(1e-5)) {
    const int c = x.val.dim(0);
    const size_t vox = x.val.numel() / size_t(c);
    Act<T>& y = g.make(x.val.shape());

    // Cache normalized values and inverse stddev for the backward pass.
    auto xhat = std::make_shared<Tensor<T>>(x.val.shape());
    auto invstd = std::make_shared<std::vector<T>>(size_t(c));

    for (int ch = 0; ch < c; ++ch) {
        const T* xc = x.val.data() + size_t(ch) * vox;
        T mean = 0;
        for (size_t i = 0; i < vox; ++i) mean += xc[i];
        mean /= T(vox);
        T var = 0;
        for (size_t i = 0; i < vox; ++i) {
            const T d = xc[i] - mean;
            var += d * d;
        }
        var /= T(vox);
        const T is = T(1) / std::sqrt(var + eps);
        (*invstd)[size_t(ch)] = is;
        T* xh = xhat->data() + size_t(ch) * vox;
        T* yc = y.val.data() + size_t(ch) * vox;
        const T gm = gamma.value[size_t(ch)], bt = beta.value[size_t(ch)];
        for (size_t i = 0; i < vox; ++i) {
            xh[i] = (xc[i] - mean) * is;
            yc[i] = gm * xh[i] + bt;
        }
    }

    g.tape([&x, &gamma, &beta, &y, xhat, invstd, c, vox] {
        for (int ch = 0; ch < c; ++ch) {
            const T* gy = y.grad.data() + size_t(ch) * vox;
            const T* xh = xhat->data() + size_t(ch) * vox;
            T* gx = x.grad.data() + size_t(ch) * vox;
            T sum_gy = 0, sum_gy_xh = 0;
            for (size_t i = 0; i < vox; ++i) {
                sum_gy += gy[i];
                sum_gy_xh += gy[i] * xh[i];
            }
            gamma.grad[size_t(ch)] += sum_gy_xh;
            beta.grad[size_t(ch)] += sum_gy;
            const T gm = gamma.value[size_t(ch)];
            const T is = (*invstd)[size_t(ch)];
            const T mg = sum_gy / T(vox);
            const T mgx = sum_gy_xh / T(vox);
            for (size_t i = 0; i < vox; ++i)
                gx[i] += gm * is * (gy[i] - mg - xh[i] * mgx);
        }
    });
    return y;
}

template <typename T>
Act<T>& relu(Graph<T>& g, Act<T>& x) {
    Act<T>& y = g.make(x.val.shape());
    for (size_t i = 0; i < x.val.numel(); ++i) y.val[i] = x.val[i] > T(0) ? x.val[i] : T(0);
    g.tape([&x, &y] {
        for (size_t i = 0; i < y.val.numel(); ++i)
            if (y.val[i] > T(0)) x.grad[i] += y.grad[i];
    });
    return y;
}

template <typename T>
T stable_sigmoid(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Act<T>& sigmoid(Graph<T>& g, Act<T>& x) {
    Act<T>& y = g.make(x.val.shape());
    for (size_t i = 0; i < x.val.numel(); ++i) y.val[i] = stable_sigmoid(x.val[i]);
    g.tape([&x, &y] {
        for (size_t i = 0; i < y.val.numel(); ++i)
            x.grad[i] += y.grad[i] * y.val[i] * (T(1) - y.val[i]);
    });
    return y;
}

// Global average pool (C,D,H,W) -> (C).
template <typename T>
Act<T>& gap(Graph<T>& g, Act<T>& x) {
    const int c = x.val.dim(0);
    const size_t vox = x.val.numel() / size_t(c);
    Act<T>& y = g.make({c});
    for (int ch = 0; ch < c; ++ch) {
        const T* xc = x.val.data() + size_t(ch) * vox;
        T s = 0;
        for (size_t i = 0; i < vox; ++i) s += xc[i];
        y.val[size_t(ch)] = s / T(vox);
    }
    g.tape([&x, &y, c, vox] {
        for (int ch = 0; ch < c; ++ch) {
            const T gv = y.grad[size_t(ch)] / T(vox);
            T* gx = x.grad.data() + size_t(ch) * vox;
            for (size_t i = 0; i < vox; ++i) gx[i] += gv;
        }
    });
    return y;
}

// Fully connected (I) -> (O), weight (O,I).
template <typename T>
Act<T>& fc(Graph<T>& g, Act<T>& x, Param<T>& w, Param<T>& b) {
    const int in = x.val.dim(0), out = w.value.dim(0);
    if (w.value.dim(1) != in) throw ShapeError("fc " + w.name + ": fan-in mismatch");
    Act<T>& y = g.make({out});
    for (int o = 0; o < out; ++o) {
        T s = b.value[size_t(o)];
        const T* wr = w.value.data() + size_t(o) * in;
        for (int i = 0; i < in; ++i) s += wr[i] * x.val[size_t(i)];
        y.val[size_t(o)] = s;
    }
    g.tape([&x, &w, &b, &y, in, out] {
        for (int o = 0; o < out; ++o) {
            const T gy = y.grad[size_t(o)];
            b.grad[size_t(o)] += gy;
            const T* wr = w.value.data() + size_t(o) * in;
            T* gwr = w.grad.data() + size_t(o) * in;
            for (int i = 0; i < in; ++i) {
                gwr[i] += gy * x.val[size_t(i)];
                x.grad[size_t(i)] += gy * wr[i];
            }
        }
    });
    return y;
}

// y = x + a (.) x, channel vector a broadcast over space. One fused op keeps
// the attention arithmetic in a single tape step.
template <typename T>
Act<T>& channel_gate(Graph<T>& g, Act<T>& x, Act<T>& a) {
    const int c = x.val.dim(0);
    if (a.val.rank() != 1 || a.val.dim(0) != c)
        throw ShapeError("channel_gate: attention vector length != channels");
    const size_t vox = x.val.numel() / size_t(c);
    Act<T>& y = g.make(x.val.shape());
    for (int ch = 0; ch < c; ++ch) {
        const T s = T(1) + a.val[size_t(ch)];
        const T* xc = x.val.data() + size_t(ch) * vox;
        T* yc = y.val.data() + size_t(ch) * vox;
        for (size_t i = 0; i < vox; ++i) yc[i] = s * xc[i];
    }
    g.tape([&x, &a, &y, c, vox] {
        for (int ch = 0; ch < c; ++ch) {
            const T s = T(1) + a.val[size_t(ch)];
            const T* xc = x.val.data() + size_t(ch) * vox;
            const T* gy = y.grad.data() + size_t(ch) * vox;
            T* gx = x.grad.data() + size_t(ch) * vox;
            T ga = 0;
            for (size_t i = 0; i < vox; ++i) {
                gx[i] += s * gy[i];
                ga += gy[i] * xc[i];
            }
            a.grad[size_t(ch)] += ga;
        }
    });
    return y;
}

namespace detail {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<float> w0;
};

// Output->input mapping for a x2 upsample, half-voxel-centre convention:
// src = (dst + 0.5) / 2 - 0.5, clamped at the borders.
inline LerpAxis lerp_axis(int n_in, int n_out) {
    LerpAxis ax;
    ax.i0.resize(size_t(n_out));
    ax.i1.resize(size_t(n_out));
    ax.w0.resize(size_t(n_out));
    for (int o = 0; o < n_out; ++o) {
        const double c = (o + 0.5) / 2.0 - 0.5;
        const int f = int(std::floor(c));
        const double frac = c - f;
        ax.i0[size_t(o)] = std::clamp(f, 0, n_in - 1);
        ax.i1[size_t(o)] = std::clamp(f + 1, 0, n_in - 1);
        ax.w0[size_t(o)] = float(1.0 - frac);
    }
    return ax;
}

}  // namespace detail

// Trilinear x2 upsample to exactly (out_d, out_h, out_w) = 2 x input dims.
template <typename T>
Act<T>& upsample2(Graph<T>& g, Act<T>& x, int out_d, int out_h, int out_w) {
    const int c = x.val.dim(0), d = x.val.dim(1), h = x.val.dim(2), w = x.val.dim(3);
    if (out_d != 2 * d || out_h != 2 * h || out_w != 2 * w)
        throw ShapeError("upsample2: output dims must be exactly double the input");
    Act<T>& y = g.make({c, out_d, out_h, out_w});

    const auto az = detail::lerp_axis(d, out_d);
    const auto ay = detail::lerp_axis(h, out_h);
    const auto ax = detail::lerp_axis(w, out_w);

    for (int ch = 0; ch < c; ++ch) {
        const T* xc = x.val.data() + size_t(ch) * d * h * w;
        T* yc = y.val.data() + size_t(ch) * out_d * out_h * out_w;
        for (int z = 0; z < out_d; ++z) {
            const int z0 = az.i0[size_t(z)], z1 = az.i1[size_t(z)];
            const T wz0 = T(az.w0[size_t(z)]), wz1 = T(1) - wz0;
            for (int y2 = 0; y2 < out_h; ++y2) {
                const int y0 = ay.i0[size_t(y2)], y1 = ay.i1[size_t(y2)];
                const T wy0 = T(ay.w0[size_t(y2)]), wy1 = T(1) - wy0;
                const T* r00 = xc + (size_t(z0) * h + y0) * w;
                const T* r01 = xc + (size_t(z0) * h + y1) * w;
                const T* r10 = xc + (size_t(z1) * h + y0) * w;
                const T* r11 = xc + (size_t(z1) * h + y1) * w;
                T* orow = yc + (size_t(z) * out_h + y2) * out_w;
                for (int x2 = 0; x2 < out_w; ++x2) {
                    const int x0 = ax.i0[size_t(x2)], x1 = ax.i1[size_t(x2)];
                    const T wx0 = T(ax.w0[size_t(x2)]), wx1 = T(1) - wx0;
                    orow[x2] = wz0 * (wy0 * (wx0 * r00[x0] + wx1 * r00[x1]) +
                                      wy1 * (wx0 * r01[x0] + wx1 * r01[x1])) +
                               wz1 * (wy0 * (wx0 * r10[x0] + wx1 * r10[x1]) +
                                      wy1 * (wx0 * r11[x0] + wx1 * r11[x1]));
                }
            }
        }
    }

    g.tape([&x, &y, az, ay, ax, c, d, h, w, out_d, out_h, out_w] {
        for (int ch = 0; ch < c; ++ch) {
            T* gx = x.grad.data() + size_t(ch) * d * h * w;
            const T* gy = y.grad.data() + size_t(ch) * out_d * out_h * out_w;
            for (int z = 0; z < out_d; ++z) {
                const int z0 = az.i0[size_t(z)], z1 = az.i1[size_t(z)];
                const T wz0 = T(az.w0[size_t(z)]), wz1 = T(1) - wz0;
                for (int y2 = 0; y2 < out_h; ++y2) {
                    const int y0 = ay.i0[size_t(y2)], y1 = ay.i1[size_t(y2)];
                    const T wy0 = T(ay.w0[size_t(y2)]), wy1 = T(1) - wy0;
                    T* g00 = gx + (size_t(z0) * h + y0) * w;
                    T* g01 = gx + (size_t(z0) * h + y1) * w;
                    T* g10 = gx + (size_t(z1) * h + y0) * w;
                    T* g11 = gx + (size_t(z1) * h + y1) * w;
                    const T* grow = gy + (size_t(z) * out_h + y2) * out_w;
                    for (int x2 = 0; x2 < out_w; ++x2) {
                        const int x0 = ax.i0[size_t(x2)], x1 = ax.i1[size_t(x2)];
                        const T wx0 = T(ax.w0[size_t(x2)]), wx1 = T(1) - wx0;
                        const T gv = grow[x2];
                        g00[x0] += wz0 * wy0 * wx0 * gv;
                        g00[x1] += wz0 * wy0 * wx1 * gv;
                        g01[x0] += wz0 * wy1 * wx0 * gv;
                        g01[x1] += wz0 * wy1 * wx1 * gv;
                        g10[x0] += wz1 * wy0 * wx0 * gv;
                        g10[x1] += wz1 * wy0 * wx1 * gv;
                        g11[x0] += wz1 * wy1 * wx0 * gv;
                        g11[x1] += wz1 * wy1 * wx1 * gv;
                    }
                }
            }
        }
    });
    return y;
}

// Channel concatenation of two maps with equal spatial dims.
template <typename T>
Act<T>& concat_c(Graph<T>& g, Act<T>& a, Act<T>& b) {
    for (int i = 1; i < 4; ++i)
        if (a.val.dim(i) != b.val.dim(i))
            throw ShapeError("concat_c: spatial dims differ: " + a.val.shape_str() + " vs " +
                             b.val.shape_str());
    const size_t na = a.val.numel(), nb = b.val.numel();
    Act<T>& y =
        g.make({a.val.dim(0) + b.val.dim(0), a.val.dim(1), a.val.dim(2), a.val.dim(3)});
    std::copy(a.val.data(), a.val.data() + na, y.val.data());
    std::copy(b.val.data(), b.val.data() + nb, y.val.data() + na);
    g.tape([&a, &b, &y, na, nb] {
        for (size_t i = 0; i < na; ++i) a.grad[i] += y.grad[i];
        for (size_t i = 0; i < nb; ++i) b.grad[i] += y.grad[na + i];
    });
    return y;
}

}  // namespace ctseg::nn
