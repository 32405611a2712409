#include "psm/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "psm/common.hpp"

namespace psm::nn {

namespace {

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }
bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error(op, a, b);
}

std::size_t rows_of(const Tensor& x) { return x.numel() / static_cast<std::size_t>(x.dim(-1)); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same("add", a, b);
    std::vector<double> out(a.numel());
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p)
            if (wants(self, p)) {
                auto& g = parent(self, p).grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same("sub", a, b);
    std::vector<double> out(a.numel());
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        if (wants(self, 0)) {
            auto& g = parent(self, 0).grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self, 1)) {
            auto& g = parent(self, 1).grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same("mul", a, b);
    std::vector<double> out(a.numel());
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        auto& na = parent(self, 0);
        auto& nb = parent(self, 1);
        if (na.requires_grad)
            for (std::size_t i = 0; i < na.grad.size(); ++i) na.grad[i] += self.grad[i] * nb.data[i];
        if (nb.requires_grad)
            for (std::size_t i = 0; i < nb.grad.size(); ++i) nb.grad[i] += self.grad[i] * na.data[i];
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    const auto da = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& g = parent(self, 0).grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const auto& xs = x.shape();
    const auto& bs = b.shape();
    if (bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<std::ptrdiff_t>(bs.size())))
        shape_error("add_bias", x, b);
    const std::size_t inner = b.numel();
    std::vector<double> out(x.data().begin(), x.data().end());
    const auto db = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += db[i % inner];
    return make_result(xs, std::move(out), {x, b}, [inner](Node& self) {
        if (wants(self, 0)) {
            auto& g = parent(self, 0).grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self, 1)) {
            auto& g = parent(self, 1).grad;
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (b.rank() != 2 || a.rank() < 1 || a.dim(-1) != b.dim(0)) shape_error("matmul", a, b);
    const auto k = static_cast<std::size_t>(b.dim(0));
    const auto n = static_cast<std::size_t>(b.dim(1));
    const std::size_t m = rows_of(a);
    std::vector<double> out(m * n, 0.0);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = da[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * db[p * n + j];
        }
    Shape s = a.shape();
    s.back() = static_cast<int>(n);
    return make_result(std::move(s), std::move(out), {a, b}, [m, k, n](Node& self) {
        auto& na = parent(self, 0);
        auto& nb = parent(self, 1);
        const auto& g = self.grad;
        if (na.requires_grad)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * nb.data[p * n + j];
                    na.grad[i * k + p] += acc;
                }
        if (nb.requires_grad)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = na.data[i * k + p];
                    for (std::size_t j = 0; j < n; ++j) nb.grad[p * n + j] += av * g[i * n + j];
                }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(1)) shape_error("linear", x, w);
    const auto in = static_cast<std::size_t>(w.dim(1));
    const auto outd = static_cast<std::size_t>(w.dim(0));
    if (b.defined() && (b.rank() != 1 || static_cast<std::size_t>(b.dim(0)) != outd)) shape_error("linear(bias)", w, b);
    const std::size_t m = rows_of(x);
    const auto dx = x.data();
    const auto dw = w.data();

    std::vector<double> wt(in * outd);
    for (std::size_t o = 0; o < outd; ++o)
        for (std::size_t i = 0; i < in; ++i) wt[i * outd + o] = dw[o * in + i];
    std::vector<double> out(m * outd, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        double* y = out.data() + r * outd;
        if (b.defined()) std::copy(b.data().begin(), b.data().end(), y);
        const double* xr = dx.data() + r * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xv = xr[i];
            const double* wr = wt.data() + i * outd;
            for (std::size_t o = 0; o < outd; ++o) y[o] += xv * wr[o];
        }
    }
    Shape s = x.shape();
    s.back() = static_cast<int>(outd);
    std::vector<Tensor> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_result(std::move(s), std::move(out), std::move(parents), [m, in, outd](Node& self) {
        auto& nx = parent(self, 0);
        auto& nw = parent(self, 1);
        const auto& g = self.grad;
        if (nx.requires_grad)
            for (std::size_t r = 0; r < m; ++r) {
                double* gx = nx.grad.data() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const double go = g[r * outd + o];
                    if (go == 0.0) continue;
                    const double* wr = nw.data.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gx[i] += go * wr[i];
                }
            }
        if (nw.requires_grad)
            for (std::size_t r = 0; r < m; ++r) {
                const double* xr = nx.data.data() + r * in;
                for (std::size_t o = 0; o < outd; ++o) {
                    const double go = g[r * outd + o];
                    if (go == 0.0) continue;
                    double* gw = nw.grad.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gw[i] += go * xr[i];
                }
            }
        if (self.parents.size() > 2 && wants(self, 2)) {
            auto& gb = parent(self, 2).grad;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_error("bmm", a, b);
    const auto B = static_cast<std::size_t>(a.dim(0));
    const auto m = static_cast<std::size_t>(a.dim(1));
    const auto k = static_cast<std::size_t>(a.dim(2));
    if (static_cast<std::size_t>(transpose_b ? b.dim(2) : b.dim(1)) != k) shape_error("bmm", a, b);
    const auto n = static_cast<std::size_t>(transpose_b ? b.dim(1) : b.dim(2));
    // b element (p, j) of batch z
    const auto bidx = [=](std::size_t z, std::size_t p, std::size_t j) {
        return transpose_b ? (z * n + j) * k + p : (z * k + p) * n + j;
    };
    std::vector<double> out(B * m * n, 0.0);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t z = 0; z < B; ++z)
        for (std::size_t i = 0; i < m; ++i) {
            double* y = out.data() + (z * m + i) * n;
            if (transpose_b) {
                const double* ar = da.data() + (z * m + i) * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double* br = db.data() + (z * n + j) * k;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
                    y[j] = acc;
                }
            } else {
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = da[(z * m + i) * k + p];
                    const double* br = db.data() + (z * k + p) * n;
                    for (std::size_t j = 0; j < n; ++j) y[j] += av * br[j];
                }
            }
        }
    return make_result({static_cast<int>(B), static_cast<int>(m), static_cast<int>(n)}, std::move(out), {a, b},
                       [=](Node& self) {
                           auto& na = parent(self, 0);
                           auto& nb = parent(self, 1);
                           const auto& g = self.grad;
                           for (std::size_t z = 0; z < B; ++z)
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) {
                                       const double gv = g[(z * m + i) * n + j];
                                       if (gv == 0.0) continue;
                                       for (std::size_t p = 0; p < k; ++p) {
                                           if (na.requires_grad) na.grad[(z * m + i) * k + p] += gv * nb.data[bidx(z, p, j)];
                                           if (nb.requires_grad) nb.grad[bidx(z, p, j)] += gv * na.data[(z * m + i) * k + p];
                                       }
                                   }
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel())
        throw ValidationError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
        auto& g = parent(self, 0).grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ValidationError("transpose: expected 2-D, got " + shape_str(a.shape()));
    const auto r = static_cast<std::size_t>(a.dim(0));
    const auto c = static_cast<std::size_t>(a.dim(1));
    std::vector<double> out(r * c);
    const auto d = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = d[i * c + j];
    return make_result({static_cast<int>(c), static_cast<int>(r)}, std::move(out), {a}, [r, c](Node& self) {
        auto& g = parent(self, 0).grad;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const auto d = static_cast<std::size_t>(x.dim(-1));
    if (gamma.numel() != d || beta.numel() != d) shape_error("layer_norm", x, gamma);
    const std::size_t m = rows_of(x);
    const auto dx = x.data();
    const auto dg = gamma.data();
    const auto dbeta = beta.data();
    std::vector<double> xhat(m * d);
    std::vector<double> inv(m);
    std::vector<double> out(m * d);
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = dx.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(d);
        inv[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (xr[i] - mu) * inv[r];
            xhat[r * d + i] = h;
            out[r * d + i] = h * dg[i] + dbeta[i];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [m, d, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
                           auto& nx = parent(self, 0);
                           auto& ng = parent(self, 1);
                           const auto& g = self.grad;
                           if (wants(self, 1))
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t i = 0; i < d; ++i) ng.grad[i] += g[r * d + i] * xhat[r * d + i];
                           if (wants(self, 2)) {
                               auto& gb = parent(self, 2).grad;
                               for (std::size_t r = 0; r < m; ++r)
                                   for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
                           }
                           if (nx.requires_grad)
                               for (std::size_t r = 0; r < m; ++r) {
                                   double s1 = 0.0, s2 = 0.0;
                                   for (std::size_t i = 0; i < d; ++i) {
                                       const double gh = g[r * d + i] * ng.data[i];
                                       s1 += gh;
                                       s2 += gh * xhat[r * d + i];
                                   }
                                   s1 /= static_cast<double>(d);
                                   s2 /= static_cast<double>(d);
                                   for (std::size_t i = 0; i < d; ++i) {
                                       const double gh = g[r * d + i] * ng.data[i];
                                       nx.grad[r * d + i] += inv[r] * (gh - s1 - xhat[r * d + i] * s2);
                                   }
                               }
                       });
}

Tensor gelu(const Tensor& x) {
    const auto dx = x.data();
    std::vector<double> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * dx[i] * (1.0 + std::erf(dx[i] * std::numbers::sqrt2 / 2.0));
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& nx = parent(self, 0);
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < nx.grad.size(); ++i) {
            const double v = nx.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            nx.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

Tensor relu(const Tensor& x) {
    const auto dx = x.data();
    std::vector<double> out(dx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = dx[i] > 0.0 ? dx[i] : 0.0;
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& nx = parent(self, 0);
        for (std::size_t i = 0; i < nx.grad.size(); ++i)
            if (nx.data[i] > 0.0) nx.grad[i] += self.grad[i];
    });
}

Tensor softmax(const Tensor& x) {
    const auto d = static_cast<std::size_t>(x.dim(-1));
    const std::size_t m = rows_of(x);
    const auto dx = x.data();
    std::vector<double> out(m * d);
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = dx.data() + r * d;
        double* y = out.data() + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            y[i] = std::exp(xr[i] - mx);
            s += y[i];
        }
        for (std::size_t i = 0; i < d; ++i) y[i] /= s;
    }
    return make_result(x.shape(), std::move(out), {x}, [m, d](Node& self) {
        auto& nx = parent(self, 0);
        for (std::size_t r = 0; r < m; ++r) {
            const double* y = self.data.data() + r * d;
            const double* g = self.grad.data() + r * d;
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
            for (std::size_t i = 0; i < d; ++i) nx.grad[r * d + i] += y[i] * (g[i] - dot);
        }
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return make_result({1}, {s}, {x}, [](Node& self) {
        auto& g = parent(self, 0).grad;
        for (auto& v : g) v += self.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.rank() < 1 || start < 0 || count < 0 || start + count > x.dim(0))
        throw ValidationError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                              shape_str(x.shape()));
    const std::size_t inner = x.numel() / static_cast<std::size_t>(x.dim(0));
    const auto first = static_cast<std::ptrdiff_t>(static_cast<std::size_t>(start) * inner);
    std::vector<double> out(x.data().begin() + first,
                            x.data().begin() + first + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(count) * inner));
    Shape s = x.shape();
    s[0] = count;
    return make_result(std::move(s), std::move(out), {x}, [first](Node& self) {
        auto& g = parent(self, 0).grad;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[static_cast<std::size_t>(first) + i] += self.grad[i];
    });
}

Tensor slice_tokens(const Tensor& x, int start, int count) {
    if (x.rank() != 3 || start < 0 || count < 0 || start + count > x.dim(1))
        throw ValidationError("slice_tokens: [" + std::to_string(start) + ", +" + std::to_string(count) + ") out of " +
                              shape_str(x.shape()));
    const auto B = static_cast<std::size_t>(x.dim(0));
    const auto T = static_cast<std::size_t>(x.dim(1));
    const auto D = static_cast<std::size_t>(x.dim(2));
    const auto s0 = static_cast<std::size_t>(start);
    const auto n = static_cast<std::size_t>(count);
    std::vector<double> out(B * n * D);
    const auto dx = x.data();
    for (std::size_t b = 0; b < B; ++b)
        std::copy_n(dx.begin() + static_cast<std::ptrdiff_t>((b * T + s0) * D), n * D,
                    out.begin() + static_cast<std::ptrdiff_t>(b * n * D));
    return make_result({static_cast<int>(B), count, static_cast<int>(D)}, std::move(out), {x},
                       [B, T, D, s0, n](Node& self) {
                           auto& g = parent(self, 0).grad;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t i = 0; i < n * D; ++i) g[(b * T + s0) * D + i] += self.grad[b * n * D + i];
                       });
}

Tensor cat_tokens(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) shape_error("cat_tokens", a, b);
    const auto B = static_cast<std::size_t>(a.dim(0));
    const auto T1 = static_cast<std::size_t>(a.dim(1));
    const auto T2 = static_cast<std::size_t>(b.dim(1));
    const auto D = static_cast<std::size_t>(a.dim(2));
    const auto T = T1 + T2;
    std::vector<double> out(B * T * D);
    for (std::size_t z = 0; z < B; ++z) {
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(z * T1 * D), T1 * D,
                    out.begin() + static_cast<std::ptrdiff_t>(z * T * D));
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(z * T2 * D), T2 * D,
                    out.begin() + static_cast<std::ptrdiff_t>((z * T + T1) * D));
    }
    return make_result({static_cast<int>(B), static_cast<int>(T), static_cast<int>(D)}, std::move(out), {a, b},
                       [B, T1, T2, D](Node& self) {
                           const auto T = T1 + T2;
                           for (std::size_t z = 0; z < B; ++z) {
                               if (wants(self, 0)) {
                                   auto& g = parent(self, 0).grad;
                                   for (std::size_t i = 0; i < T1 * D; ++i) g[z * T1 * D + i] += self.grad[z * T * D + i];
                               }
                               if (wants(self, 1)) {
                                   auto& g = parent(self, 1).grad;
                                   for (std::size_t i = 0; i < T2 * D; ++i)
                                       g[z * T2 * D + i] += self.grad[(z * T + T1) * D + i];
                               }
                           }
                       });
}

Tensor expand_batch(const Tensor& t, int batch) {
    if (t.rank() != 2 || batch < 1) throw ValidationError("expand_batch: expected (T, D), got " + shape_str(t.shape()));
    const std::size_t inner = t.numel();
    std::vector<double> out(inner * static_cast<std::size_t>(batch));
    for (int z = 0; z < batch; ++z)
        std::copy(t.data().begin(), t.data().end(), out.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(z) * inner));
    return make_result({batch, t.dim(0), t.dim(1)}, std::move(out), {t}, [inner](Node& self) {
        auto& g = parent(self, 0).grad;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    });
}

Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx) {
    if (x.rank() != 3 || idx.size() != static_cast<std::size_t>(x.dim(0)))
        throw ValidationError("gather_tokens: index batch does not match " + shape_str(x.shape()));
    const auto B = static_cast<std::size_t>(x.dim(0));
    const auto T = static_cast<std::size_t>(x.dim(1));
    const auto D = static_cast<std::size_t>(x.dim(2));
    const std::size_t K = idx.empty() ? 0 : idx[0].size();
    std::vector<double> out(B * K * D);
    for (std::size_t b = 0; b < B; ++b) {
        if (idx[b].size() != K) throw ValidationError("gather_tokens: ragged index lists");
        for (std::size_t k = 0; k < K; ++k) {
            const auto t = static_cast<std::size_t>(idx[b][k]);
            if (idx[b][k] < 0 || t >= T) throw ValidationError("gather_tokens: token index out of range");
            std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((b * T + t) * D), D,
                        out.begin() + static_cast<std::ptrdiff_t>((b * K + k) * D));
        }
    }
    return make_result({static_cast<int>(B), static_cast<int>(K), static_cast<int>(D)}, std::move(out), {x},
                       [idx, T, D, K](Node& self) {
                           auto& g = parent(self, 0).grad;
                           for (std::size_t b = 0; b < idx.size(); ++b)
                               for (std::size_t k = 0; k < K; ++k) {
                                   const auto t = static_cast<std::size_t>(idx[b][k]);
                                   for (std::size_t i = 0; i < D; ++i)
                                       g[(b * T + t) * D + i] += self.grad[(b * K + k) * D + i];
                               }
                       });
}

Tensor scatter_tokens(const Tensor& x, const std::vector<std::vector<int>>& idx, int total, const Tensor& fill) {
    if (x.rank() != 3 || idx.size() != static_cast<std::size_t>(x.dim(0)))
        throw ValidationError("scatter_tokens: index batch does not match " + shape_str(x.shape()));
    const auto B = static_cast<std::size_t>(x.dim(0));
    const auto K = static_cast<std::size_t>(x.dim(1));
    const auto D = static_cast<std::size_t>(x.dim(2));
    const auto T = static_cast<std::size_t>(total);
    if (fill.numel() != D) shape_error("scatter_tokens(fill)", x, fill);
    std::vector<char> filled(B * T, 0);
    std::vector<double> out(B * T * D);
    for (std::size_t b = 0; b < B; ++b) {
        if (idx[b].size() != K) throw ValidationError("scatter_tokens: index list length != token count");
        for (std::size_t k = 0; k < K; ++k) {
            const auto t = static_cast<std::size_t>(idx[b][k]);
            if (idx[b][k] < 0 || t >= T || filled[b * T + t]) throw ValidationError("scatter_tokens: bad or repeated index");
            filled[b * T + t] = 1;
            std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>((b * K + k) * D), D,
                        out.begin() + static_cast<std::ptrdiff_t>((b * T + t) * D));
        }
        for (std::size_t t = 0; t < T; ++t)
            if (!filled[b * T + t])
                std::copy(fill.data().begin(), fill.data().end(), out.begin() + static_cast<std::ptrdiff_t>((b * T + t) * D));
    }
    return make_result({static_cast<int>(B), total, static_cast<int>(D)}, std::move(out), {x, fill},
                       [idx, filled = std::move(filled), B, K, D, T](Node& self) {
                           if (wants(self, 0)) {
                               auto& g = parent(self, 0).grad;
                               for (std::size_t b = 0; b < B; ++b)
                                   for (std::size_t k = 0; k < K; ++k) {
                                       const auto t = static_cast<std::size_t>(idx[b][k]);
                                       for (std::size_t i = 0; i < D; ++i)
                                           g[(b * K + k) * D + i] += self.grad[(b * T + t) * D + i];
                                   }
                           }
                           if (wants(self, 1)) {
                               auto& g = parent(self, 1).grad;
                               for (std::size_t bt = 0; bt < B * T; ++bt)
                                   if (!filled[bt])
                                       for (std::size_t i = 0; i < D; ++i) g[i] += self.grad[bt * D + i];
                           }
                       });
}

Tensor split_heads(const Tensor& qkv, int heads, int which) {
    if (qkv.rank() != 3 || qkv.dim(2) % (3 * heads) != 0 || which < 0 || which > 2)
        throw ValidationError("split_heads: cannot split " + shape_str(qkv.shape()) + " into " + std::to_string(heads) +
                              " heads");
    const auto B = static_cast<std::size_t>(qkv.dim(0));
    const auto T = static_cast<std::size_t>(qkv.dim(1));
    const auto D = static_cast<std::size_t>(qkv.dim(2) / 3);
    const auto H = static_cast<std::size_t>(heads);
    const std::size_t dh = D / H;
    const std::size_t off = static_cast<std::size_t>(which) * D;
    std::vector<double> out(B * H * T * dh);
    const auto src = qkv.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = 0; h < H; ++h)
                std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * T + t) * 3 * D + off + h * dh), dh,
                            out.begin() + static_cast<std::ptrdiff_t>(((b * H + h) * T + t) * dh));
    return make_result({static_cast<int>(B * H), static_cast<int>(T), static_cast<int>(dh)}, std::move(out), {qkv},
                       [B, T, D, H, dh, off](Node& self) {
                           auto& g = parent(self, 0).grad;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t h = 0; h < H; ++h)
                                       for (std::size_t i = 0; i < dh; ++i)
                                           g[(b * T + t) * 3 * D + off + h * dh + i] +=
                                               self.grad[((b * H + h) * T + t) * dh + i];
                       });
}

Tensor merge_heads(const Tensor& x, int heads) {
    if (x.rank() != 3 || x.dim(0) % heads != 0)
        throw ValidationError("merge_heads: cannot merge " + shape_str(x.shape()) + " over " + std::to_string(heads) +
                              " heads");
    const auto H = static_cast<std::size_t>(heads);
    const auto B = static_cast<std::size_t>(x.dim(0)) / H;
    const auto T = static_cast<std::size_t>(x.dim(1));
    const auto dh = static_cast<std::size_t>(x.dim(2));
    const std::size_t D = H * dh;
    std::vector<double> out(B * T * D);
    const auto src = x.data();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < T; ++t)
                std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(((b * H + h) * T + t) * dh), dh,
                            out.begin() + static_cast<std::ptrdiff_t>((b * T + t) * D + h * dh));
    return make_result({static_cast<int>(B), static_cast<int>(T), static_cast<int>(D)}, std::move(out), {x},
                       [B, T, H, dh, D](Node& self) {
                           auto& g = parent(self, 0).grad;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t h = 0; h < H; ++h)
                                   for (std::size_t t = 0; t < T; ++t)
                                       for (std::size_t i = 0; i < dh; ++i)
                                           g[((b * H + h) * T + t) * dh + i] += self.grad[(b * T + t) * D + h * dh + i];
                       });
}

Tensor unfold_causal(const Tensor& x, int kernel, int steps) {
    if (x.rank() != 3 || kernel < 1 || steps < 1 || steps > x.dim(1))
        throw ValidationError("unfold_causal: bad kernel/steps for " + shape_str(x.shape()));
    const auto B = static_cast<std::size_t>(x.dim(0));
    const auto L = static_cast<std::size_t>(x.dim(1));
    const auto C = static_cast<std::size_t>(x.dim(2));
    const auto K = static_cast<std::size_t>(kernel);
    const auto S = static_cast<std::size_t>(steps);
    std::vector<double> out(B * S * K * C, 0.0);
    const auto src = x.data();
    // source frame for output step s, tap j; negative means zero padding
    const auto frame_of = [L, S, K](std::size_t s, std::size_t j) {
        return static_cast<long long>(L - S + s) - static_cast<long long>(K - 1) + static_cast<long long>(j);
    };
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s)
            for (std::size_t j = 0; j < K; ++j) {
                const long long f = frame_of(s, j);
                if (f < 0) continue;
                std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * L + static_cast<std::size_t>(f)) * C), C,
                            out.begin() + static_cast<std::ptrdiff_t>(((b * S + s) * K + j) * C));
            }
    return make_result({static_cast<int>(B), steps, static_cast<int>(K * C)}, std::move(out), {x},
                       [B, L, C, K, S, frame_of](Node& self) {
                           auto& g = parent(self, 0).grad;
                           for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t s = 0; s < S; ++s)
                                   for (std::size_t j = 0; j < K; ++j) {
                                       const long long f = frame_of(s, j);
                                       if (f < 0) continue;
                                       for (std::size_t c = 0; c < C; ++c)
                                           g[(b * L + static_cast<std::size_t>(f)) * C + c] +=
                                               self.grad[((b * S + s) * K + j) * C + c];
                                   }
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != labels.size())
        throw ValidationError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                              std::to_string(labels.size()) + " labels");
    const auto B = static_cast<std::size_t>(logits.dim(0));
    const auto K = static_cast<std::size_t>(logits.dim(1));
    const auto d = logits.data();
    std::vector<double> probs(B * K);
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= K)
            throw ValidationError("cross_entropy: label " + std::to_string(labels[b]) + " out of range [0, " +
                                  std::to_string(K) + ")");
        const double* z = d.data() + b * K;
        const double mx = *std::max_element(z, z + K);
        double s = 0.0;
        for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - mx);
        const double lse = mx + std::log(s);
        loss += lse - z[labels[b]];
        for (std::size_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(z[k] - lse);
    }
    loss /= static_cast<double>(B);
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result({1}, {loss}, {logits}, [B, K, probs = std::move(probs), lab = std::move(lab)](Node& self) {
        auto& g = parent(self, 0).grad;
        const double s = self.grad[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k)
                g[b * K + k] += s * (probs[b * K + k] - (static_cast<int>(k) == lab[b] ? 1.0 : 0.0));
    });
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, const std::vector<std::vector<bool>>& mask) {
    require_same("masked_mse", pred, target);
    if (pred.rank() != 3 || mask.size() != static_cast<std::size_t>(pred.dim(0)))
        throw ValidationError("masked_mse: expected (B, T, P) with a B x T mask, got " + shape_str(pred.shape()));
    const auto B = static_cast<std::size_t>(pred.dim(0));
    const auto T = static_cast<std::size_t>(pred.dim(1));
    const auto P = static_cast<std::size_t>(pred.dim(2));
    std::size_t masked = 0;
    for (const auto& row : mask) {
        if (row.size() != T) throw ValidationError("masked_mse: mask row length != token count");
        masked += static_cast<std::size_t>(std::count(row.begin(), row.end(), true));
    }
    if (masked == 0) throw ValidationError("masked_mse: empty mask");
    const double denom = static_cast<double>(masked * P);
    const auto dp = pred.data();
    const auto dt = target.data();
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            if (!mask[b][t]) continue;
            for (std::size_t i = 0; i < P; ++i) {
                const double e = dp[(b * T + t) * P + i] - dt[(b * T + t) * P + i];
                loss += e * e;
            }
        }
    return make_result({1}, {loss / denom}, {pred, target}, [mask, B, T, P, denom](Node& self) {
        auto& np = parent(self, 0);
        auto& nt = parent(self, 1);
        const double s = 2.0 * self.grad[0] / denom;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t) {
                if (!mask[b][t]) continue;
                for (std::size_t i = 0; i < P; ++i) {
                    const std::size_t k = (b * T + t) * P + i;
                    const double e = np.data[k] - nt.data[k];
                    if (np.requires_grad) np.grad[k] += s * e;
                    if (nt.requires_grad) nt.grad[k] -= s * e;
                }
            }
    });
}

}  // namespace psm::nn
