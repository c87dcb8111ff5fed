#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "deskmri/errors.hpp"
#include "deskmri/tensor.hpp"

namespace deskmri::nn {

/* Dense real tensor, row-major. Complex images live on the tape in the
 * two-plane real representation [2,H,W] (plane 0 real, plane 1 imaginary);
 * multi-coil k-space as [Nc,2,H,W]. Scalars are rank-0. */
template <class T>
struct RTensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  RTensor() = default;
  explicit RTensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel(shape), T(0));
  }
  static RTensor scalar(T v) {
    RTensor t{std::vector<std::size_t>{}};
    t.data[0] = v;
    return t;
  }
  static std::size_t numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }
  std::size_t size() const { return data.size(); }
};

// CTensor <-> two-plane real representation.
template <class T>
RTensor<T> planes_from_ctensor(const CTensor& t) {
  RTensor<T> out;
  if (t.rank() == 2) {
    out.shape = {2, t.shape[0], t.shape[1]};
  } else if (t.rank() == 3) {
    out.shape = {t.shape[0], 2, t.shape[1], t.shape[2]};
  } else {
    throw ShapeError("planes_from_ctensor: rank must be 2 or 3");
  }
  out.data.resize(2 * t.size());
  const std::size_t plane = t.rank() == 2 ? t.size() : t.shape[1] * t.shape[2];
  const std::size_t coils = t.rank() == 2 ? 1 : t.shape[0];
  for (std::size_t c = 0; c < coils; ++c) {
    T* re = out.data.data() + c * 2 * plane;
    T* im = re + plane;
    const cx* src = t.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      re[i] = static_cast<T>(src[i].real());
      im[i] = static_cast<T>(src[i].imag());
    }
  }
  return out;
}

template <class T>
CTensor ctensor_from_planes(const RTensor<T>& t) {
  std::vector<std::size_t> shape;
  std::size_t coils = 1, plane = 0;
  if (t.shape.size() == 3 && t.shape[0] == 2) {
    shape = {t.shape[1], t.shape[2]};
    plane = t.shape[1] * t.shape[2];
  } else if (t.shape.size() == 4 && t.shape[1] == 2) {
    shape = {t.shape[0], t.shape[2], t.shape[3]};
    coils = t.shape[0];
    plane = t.shape[2] * t.shape[3];
  } else {
    throw ShapeError("ctensor_from_planes: not a two-plane tensor");
  }
  CTensor out(shape);
  for (std::size_t c = 0; c < coils; ++c) {
    const T* re = t.data.data() + c * 2 * plane;
    const T* im = re + plane;
    cx* dst = out.data.data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i)
      dst[i] = cx(static_cast<float>(re[i]), static_cast<float>(im[i]));
  }
  return out;
}

namespace detail {

struct KernelRange {
  std::size_t oy0, oy1, ox0, ox1;
  std::ptrdiff_t dy, dx;
};

inline KernelRange kernel_range(std::size_t ky, std::size_t kx, std::size_t p,
                                std::size_t h, std::size_t w) {
  KernelRange r;
  r.dy = static_cast<std::ptrdiff_t>(ky) - static_cast<std::ptrdiff_t>(p);
  r.dx = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(p);
  r.oy0 = r.dy < 0 ? static_cast<std::size_t>(-r.dy) : 0;
  r.oy1 = r.dy > 0 ? h - static_cast<std::size_t>(r.dy) : h;
  r.ox0 = r.dx < 0 ? static_cast<std::size_t>(-r.dx) : 0;
  r.ox1 = r.dx > 0 ? w - static_cast<std::size_t>(r.dx) : w;
  return r;
}

// y[Cout,H,W] = conv(x[Cin,H,W], w[Cout,Cin,k,k]) + b, zero padding k/2.
// Inner loops run over contiguous output columns so they vectorize.
template <class T>
void conv2d_fwd(const T* x, const T* w, const T* bias, T* y, std::size_t cin,
                std::size_t cout, std::size_t h, std::size_t wd,
                std::size_t k) {
  const std::size_t p = k / 2, plane = h * wd;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    T* yp = y + oc * plane;
    const T bv = bias ? bias[oc] : T(0);
    for (std::size_t i = 0; i < plane; ++i) yp[i] = bv;
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const T* xp = x + ic * plane;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w[((oc * cin + ic) * k + ky) * k + kx];
          const auto r = kernel_range(ky, kx, p, h, wd);
          const std::size_t len = r.ox1 - r.ox0;
          for (std::size_t oy = r.oy0; oy < r.oy1; ++oy) {
            T* dst = yp + oy * wd + r.ox0;
            const T* src = xp + (oy + r.dy) * wd + (r.ox0 + r.dx);
            for (std::size_t i = 0; i < len; ++i) dst[i] += wv * src[i];
          }
        }
    }
  }
}

// gx[Cin,H,W] += transpose-conv of gy with the same weights.
template <class T>
void conv2d_bwd_x(const T* gy, const T* w, T* gx, std::size_t cin,
                  std::size_t cout, std::size_t h, std::size_t wd,
                  std::size_t k) {
  const std::size_t p = k / 2, plane = h * wd;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const T* gyp = gy + oc * plane;
    for (std::size_t ic = 0; ic < cin; ++ic) {
      T* gxp = gx + ic * plane;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const T wv = w[((oc * cin + ic) * k + ky) * k + kx];
          const auto r = kernel_range(ky, kx, p, h, wd);
          const std::size_t len = r.ox1 - r.ox0;
          for (std::size_t oy = r.oy0; oy < r.oy1; ++oy) {
            const T* src = gyp + oy * wd + r.ox0;
            T* dst = gxp + (oy + r.dy) * wd + (r.ox0 + r.dx);
            for (std::size_t i = 0; i < len; ++i) dst[i] += src[i] * wv;
          }
        }
    }
  }
}

// gw += correlation(x, gy); gb += channel sums of gy.
template <class T>
void conv2d_bwd_w(const T* gy, const T* x, T* gw, T* gb, std::size_t cin,
                  std::size_t cout, std::size_t h, std::size_t wd,
                  std::size_t k) {
  const std::size_t p = k / 2, plane = h * wd;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const T* gyp = gy + oc * plane;
    if (gb) {
      T acc(0);
      for (std::size_t i = 0; i < plane; ++i) acc += gyp[i];
      gb[oc] += acc;
    }
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const T* xp = x + ic * plane;
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          const auto r = kernel_range(ky, kx, p, h, wd);
          const std::size_t len = r.ox1 - r.ox0;
          T acc(0);
          for (std::size_t oy = r.oy0; oy < r.oy1; ++oy) {
            const T* g = gyp + oy * wd + r.ox0;
            const T* s = xp + (oy + r.dy) * wd + (r.ox0 + r.dx);
            for (std::size_t i = 0; i < len; ++i) acc += g[i] * s[i];
          }
          gw[((oc * cin + ic) * k + ky) * k + kx] += acc;
        }
    }
  }
}

}  // namespace detail

/* Reverse-mode tape. Define-by-run: each op stores its value and a backward
 * closure; backward() walks the nodes in reverse creation order. Gradients
 * accumulate only into vars that (transitively) require them. One backward
 * pass per tape. */
template <class T>
class Tape {
 public:
  using LinearFn = std::function<RTensor<T>(const RTensor<T>&)>;

  int leaf(RTensor<T> v, bool requires_grad = false) {
    vars_.push_back(Var{std::move(v), {}, requires_grad});
    backs_.emplace_back();
    return static_cast<int>(vars_.size()) - 1;
  }
  int constant(RTensor<T> v) { return leaf(std::move(v), false); }
  int scalar_const(T v) { return constant(RTensor<T>::scalar(v)); }

  const RTensor<T>& val(int id) const { return vars_[id].value; }
  T scalar_val(int id) const { return vars_[id].value.data[0]; }
  const RTensor<T>& grad(int id) const { return vars_[id].grad; }
  bool requires_grad(int id) const { return vars_[id].needs; }
  std::size_t num_vars() const { return vars_.size(); }

  int add(int a, int b) {
    check_same(a, b, "add");
    RTensor<T> out = vars_[a].value;
    const auto& bv = vars_[b].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    return emit(std::move(out), {a, b}, [this, a, b](int id) {
      const auto& g = vars_[id].grad;
      accumulate(a, g.data.data(), g.size());
      accumulate(b, g.data.data(), g.size());
    });
  }

  int sub(int a, int b) {
    check_same(a, b, "sub");
    RTensor<T> out = vars_[a].value;
    const auto& bv = vars_[b].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
    return emit(std::move(out), {a, b}, [this, a, b](int id) {
      const auto& g = vars_[id].grad;
      accumulate(a, g.data.data(), g.size());
      if (vars_[b].needs) {
        auto& gb = grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
      }
    });
  }

  int mul(int a, int b) {
    check_same(a, b, "mul");
    RTensor<T> out = vars_[a].value;
    const auto& bv = vars_[b].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
    return emit(std::move(out), {a, b}, [this, a, b](int id) {
      const auto& g = vars_[id].grad;
      if (vars_[a].needs) {
        auto& ga = grad_buf(a);
        const auto& bv2 = vars_[b].value;
        for (std::size_t i = 0; i < g.size(); ++i)
          ga.data[i] += g.data[i] * bv2.data[i];
      }
      if (vars_[b].needs) {
        auto& gb = grad_buf(b);
        const auto& av = vars_[a].value;
        for (std::size_t i = 0; i < g.size(); ++i)
          gb.data[i] += g.data[i] * av.data[i];
      }
    });
  }

  int div(int a, int b) {
    check_same(a, b, "div");
    RTensor<T> out = vars_[a].value;
    const auto& bv = vars_[b].value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] /= bv.data[i];
    return emit(std::move(out), {a, b}, [this, a, b](int id) {
      const auto& g = vars_[id].grad;
      const auto& ov = vars_[id].value;
      const auto& bv2 = vars_[b].value;
      if (vars_[a].needs) {
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i)
          ga.data[i] += g.data[i] / bv2.data[i];
      }
      if (vars_[b].needs) {
        auto& gb = grad_buf(b);
        for (std::size_t i = 0; i < g.size(); ++i)
          gb.data[i] -= g.data[i] * ov.data[i] / bv2.data[i];
      }
    });
  }

  int scale(int a, T c) {
    RTensor<T> out = vars_[a].value;
    for (auto& v : out.data) v *= c;
    return emit(std::move(out), {a}, [this, a, c](int id) {
      if (!vars_[a].needs) return;
      const auto& g = vars_[id].grad;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
    });
  }

  // Elementwise a * s with rank-0 s.
  int mul_scalar(int a, int s) {
    const T sv = scalar_val(s);
    RTensor<T> out = vars_[a].value;
    for (auto& v : out.data) v *= sv;
    return emit(std::move(out), {a, s}, [this, a, s, sv](int id) {
      const auto& g = vars_[id].grad;
      if (vars_[a].needs) {
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += sv * g.data[i];
      }
      if (vars_[s].needs) {
        auto& gs = grad_buf(s);
        const auto& av = vars_[a].value;
        T acc(0);
        for (std::size_t i = 0; i < g.size(); ++i)
          acc += g.data[i] * av.data[i];
        gs.data[0] += acc;
      }
    });
  }

  int silu(int a) {
    RTensor<T> out = vars_[a].value;
    for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
    return emit(std::move(out), {a}, [this, a](int id) {
      if (!vars_[a].needs) return;
      const auto& g = vars_[id].grad;
      auto& ga = grad_buf(a);
      const auto& av = vars_[a].value;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = av.data[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        ga.data[i] += g.data[i] * s * (T(1) + x * (T(1) - s));
      }
    });
  }

  int sqrt_op(int a) {
    RTensor<T> out = vars_[a].value;
    for (auto& v : out.data) v = std::sqrt(v);
    return emit(std::move(out), {a}, [this, a](int id) {
      if (!vars_[a].needs) return;
      const auto& g = vars_[id].grad;
      const auto& ov = vars_[id].value;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.data[i] += g.data[i] / (T(2) * ov.data[i]);
    });
  }

  int exp_op(int a) {
    RTensor<T> out = vars_[a].value;
    for (auto& v : out.data) v = std::exp(v);
    return emit(std::move(out), {a}, [this, a](int id) {
      if (!vars_[a].needs) return;
      const auto& g = vars_[id].grad;
      const auto& ov = vars_[id].value;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.data[i] += g.data[i] * ov.data[i];
    });
  }

  // Real inner product over all components; rank-0 output.
  int dot(int a, int b) {
    check_same(a, b, "dot");
    const auto& av = vars_[a].value;
    const auto& bv = vars_[b].value;
    T acc(0);
    for (std::size_t i = 0; i < av.size(); ++i) acc += av.data[i] * bv.data[i];
    return emit(RTensor<T>::scalar(acc), {a, b}, [this, a, b](int id) {
      const T gv = vars_[id].grad.data[0];
      if (vars_[a].needs) {
        auto& ga = grad_buf(a);
        const auto& bv2 = vars_[b].value;
        for (std::size_t i = 0; i < bv2.size(); ++i)
          ga.data[i] += gv * bv2.data[i];
      }
      if (vars_[b].needs) {
        auto& gb = grad_buf(b);
        const auto& av2 = vars_[a].value;
        for (std::size_t i = 0; i < av2.size(); ++i)
          gb.data[i] += gv * av2.data[i];
      }
    });
  }

  int conv2d(int x, int w, int b) {
    const auto& xv = vars_[x].value;
    const auto& wv = vars_[w].value;
    const auto& bv = vars_[b].value;
    if (xv.shape.size() != 3 || wv.shape.size() != 4)
      throw ShapeError("conv2d: expected x[C,H,W], w[Co,Ci,k,k]");
    if (wv.shape[1] != xv.shape[0])
      throw ShapeError("conv2d: input channel mismatch");
    if (wv.shape[2] != wv.shape[3] || wv.shape[2] % 2 == 0)
      throw ShapeError("conv2d: kernel must be square with odd size");
    if (bv.shape != std::vector<std::size_t>{wv.shape[0]})
      throw ShapeError("conv2d: bias size mismatch");
    const std::size_t cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
    const std::size_t cout = wv.shape[0], k = wv.shape[2];
    RTensor<T> out({cout, h, wd});
    detail::conv2d_fwd(xv.data.data(), wv.data.data(), bv.data.data(),
                       out.data.data(), cin, cout, h, wd, k);
    return emit(std::move(out), {x, w, b},
                [this, x, w, b, cin, cout, h, wd, k](int id) {
                  const auto& g = vars_[id].grad;
                  if (vars_[x].needs)
                    detail::conv2d_bwd_x(g.data.data(),
                                         vars_[w].value.data.data(),
                                         grad_buf(x).data.data(), cin, cout, h,
                                         wd, k);
                  if (vars_[w].needs || vars_[b].needs)
                    detail::conv2d_bwd_w(
                        g.data.data(), vars_[x].value.data.data(),
                        grad_buf(w).data.data(),
                        vars_[b].needs ? grad_buf(b).data.data() : nullptr,
                        cin, cout, h, wd, k);
                });
  }

  int avgpool2(int x) {
    const auto& xv = vars_[x].value;
    if (xv.shape.size() != 3 || xv.shape[1] % 2 || xv.shape[2] % 2)
      throw ShapeError("avgpool2: expected [C,H,W] with even H, W");
    const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    RTensor<T> out({c, h / 2, w / 2});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h / 2; ++y)
        for (std::size_t xx = 0; xx < w / 2; ++xx) {
          const T* p = xv.data.data() + (ch * h + 2 * y) * w + 2 * xx;
          out.data[(ch * (h / 2) + y) * (w / 2) + xx] =
              (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
        }
    return emit(std::move(out), {x}, [this, x, c, h, w](int id) {
      if (!vars_[x].needs) return;
      const auto& g = vars_[id].grad;
      auto& gx = grad_buf(x);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h / 2; ++y)
          for (std::size_t xx = 0; xx < w / 2; ++xx) {
            const T q = g.data[(ch * (h / 2) + y) * (w / 2) + xx] * T(0.25);
            T* p = gx.data.data() + (ch * h + 2 * y) * w + 2 * xx;
            p[0] += q;
            p[1] += q;
            p[w] += q;
            p[w + 1] += q;
          }
    });
  }

  // Nearest-neighbour 2x upsampling.
  int upsample2(int x) {
    const auto& xv = vars_[x].value;
    if (xv.shape.size() != 3) throw ShapeError("upsample2: expected [C,H,W]");
    const std::size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    RTensor<T> out({c, 2 * h, 2 * w});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          const T v = xv.data[(ch * h + y) * w + xx];
          T* p = out.data.data() + (ch * 2 * h + 2 * y) * 2 * w + 2 * xx;
          p[0] = v;
          p[1] = v;
          p[2 * w] = v;
          p[2 * w + 1] = v;
        }
    return emit(std::move(out), {x}, [this, x, c, h, w](int id) {
      if (!vars_[x].needs) return;
      const auto& g = vars_[id].grad;
      auto& gx = grad_buf(x);
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const T* p =
                g.data.data() + (ch * 2 * h + 2 * y) * 2 * w + 2 * xx;
            gx.data[(ch * h + y) * w + xx] +=
                p[0] + p[1] + p[2 * w] + p[2 * w + 1];
          }
    });
  }

  int concat_ch(int a, int b) {
    const auto& av = vars_[a].value;
    const auto& bv = vars_[b].value;
    if (av.shape.size() != 3 || bv.shape.size() != 3 ||
        av.shape[1] != bv.shape[1] || av.shape[2] != bv.shape[2])
      throw ShapeError("concat_ch: incompatible shapes");
    RTensor<T> out({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(av.size()));
    const std::size_t na = av.size();
    return emit(std::move(out), {a, b}, [this, a, b, na](int id) {
      const auto& g = vars_[id].grad;
      accumulate(a, g.data.data(), na);
      accumulate(b, g.data.data() + na, g.size() - na);
    });
  }

  /* Linear map with an exact adjoint. fwd/adj must be a true adjoint pair
   * over the real inner product; the backward pass applies adj to the
   * cotangent. */
  int linear_custom(int x, const LinearFn& fwd, LinearFn adj) {
    RTensor<T> out = fwd(vars_[x].value);
    return emit(std::move(out), {x},
                [this, x, adj = std::move(adj)](int id) {
                  if (!vars_[x].needs) return;
                  RTensor<T> gx = adj(vars_[id].grad);
                  accumulate(x, gx.data.data(), gx.size());
                });
  }

  void backward(int loss) {
    if (vars_[loss].value.size() != 1)
      throw ShapeError("backward: loss must be a scalar");
    backward_seed(loss, RTensor<T>::scalar(T(1)));
  }

  void backward_seed(int var, const RTensor<T>& cotangent) {
    if (vars_[var].value.shape != cotangent.shape)
      throw ShapeError("backward_seed: cotangent shape mismatch");
    auto& g = grad_buf(var);
    for (std::size_t i = 0; i < cotangent.size(); ++i)
      g.data[i] += cotangent.data[i];
    for (int id = var; id >= 0; --id)
      if (backs_[id] && vars_[id].grad.size() > 0) backs_[id](id);
  }

 private:
  struct Var {
    RTensor<T> value;
    RTensor<T> grad;
    bool needs = false;
  };

  void check_same(int a, int b, const char* op) const {
    if (vars_[a].value.shape != vars_[b].value.shape)
      throw ShapeError(std::string(op) + ": shape mismatch");
  }

  RTensor<T>& grad_buf(int id) {
    auto& v = vars_[id];
    if (v.grad.size() == 0) {
      v.grad = RTensor<T>(v.value.shape);
    }
    return v.grad;
  }

  void accumulate(int id, const T* g, std::size_t n) {
    if (!vars_[id].needs) return;
    auto& buf = grad_buf(id);
    for (std::size_t i = 0; i < n; ++i) buf.data[i] += g[i];
  }

  int emit(RTensor<T> value, std::initializer_list<int> inputs,
           std::function<void(int)> back) {
    bool req = false;
    for (int i : inputs) req = req || vars_[i].needs;
    vars_.push_back(Var{std::move(value), {}, req});
    backs_.push_back(req ? std::move(back) : std::function<void(int)>{});
    return static_cast<int>(vars_.size()) - 1;
  }

  std::vector<Var> vars_;
  std::vector<std::function<void(int)>> backs_;
};

}  // namespace deskmri::nn
