#pragma once

#include <cmath>
#include <functional>
#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "steerlab/common.hpp"
#include "steerlab/kernels.hpp"
#include "steerlab/tensor.hpp"

namespace steerlab {

// Reverse-mode tape. Forward calls record one entry per primitive; backward
// walks the entries in reverse, single-threaded, so gradient accumulation
// order is fixed and gradients are bitwise reproducible. Inner kernels may
// still use OpenMP: they only parallelize over independent output elements.
//
// A tape constructed with recording=false computes values only; this is the
// inference path, shared with training so both run the identical arithmetic.
template <class S>
class TapeT {
public:
    using Id = int;

    explicit TapeT(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // -------- node creation --------

    Id leaf(TensorT<S> value, bool requires_grad = false) {
        Node n;
        n.own = std::move(value);
        n.requires_grad = recording_ && requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    // Non-owning view of caller-held storage; the caller keeps it alive and
    // unchanged for the lifetime of the tape.
    Id external(const TensorT<S>* value, bool requires_grad = false) {
        Node n;
        n.ext = value;
        n.requires_grad = recording_ && requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size()) - 1;
    }

    const TensorT<S>& val(Id id) const { return check(id).value(); }

    bool requires_grad(Id id) const { return check(id).requires_grad; }

    // Gradient of a node after backward(); zero tensor if the node never
    // received a contribution (unreachable from the root).
    TensorT<S> grad(Id id) const {
        const Node& n = check(id);
        if (n.grad.empty()) return TensorT<S>::zeros(n.value().shape);
        TensorT<S> g(n.value().shape);
        g.data = n.grad;
        return g;
    }

    // -------- primitives --------

    Id matmul(Id a, Id b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        require(ta.rank() == 2 && tb.rank() == 2, "matmul expects rank-2 tensors");
        if (ta.dim(1) != tb.dim(0))
            throw ShapeError("matmul shape mismatch: " + shape_str(ta.shape) + " x " +
                             shape_str(tb.shape));
        const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
        TensorT<S> out({m, n});
        kernels::gemm_nn(m, n, k, ta.data.data(), tb.data.data(), out.data.data());
        return record("matmul", {a, b}, std::move(out), [a, b, m, n, k](TapeT& t, Id o) {
            const S* g = t.grad_data(o);
            if (t.node(a).requires_grad)
                kernels::gemm_nt(m, k, n, g, t.val(b).data.data(), t.grad_buf(a), true);
            if (t.node(b).requires_grad)
                kernels::gemm_tn(k, n, m, t.val(a).data.data(), g, t.grad_buf(b), true);
        });
    }

    // a[m,k] * b[n,k]^T
    Id matmul_nt(Id a, Id b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        require(ta.rank() == 2 && tb.rank() == 2, "matmul_nt expects rank-2 tensors");
        if (ta.dim(1) != tb.dim(1))
            throw ShapeError("matmul_nt shape mismatch: " + shape_str(ta.shape) + " x " +
                             shape_str(tb.shape) + "^T");
        const int m = ta.dim(0), k = ta.dim(1), n = tb.dim(0);
        TensorT<S> out({m, n});
        kernels::gemm_nt(m, n, k, ta.data.data(), tb.data.data(), out.data.data());
        return record("matmul_nt", {a, b}, std::move(out), [a, b, m, n, k](TapeT& t, Id o) {
            const S* g = t.grad_data(o); // [m,n]
            if (t.node(a).requires_grad)
                kernels::gemm_nn(m, k, n, g, t.val(b).data.data(), t.grad_buf(a), true);
            if (t.node(b).requires_grad)
                kernels::gemm_tn(n, k, m, g, t.val(a).data.data(), t.grad_buf(b), true);
        });
    }

    // a[m,k] * W[:, c0:c1] for W[k, N]
    Id matmul_colblock(Id a, Id w, int c0, int c1) {
        const auto& ta = val(a);
        const auto& tw = val(w);
        require(ta.rank() == 2 && tw.rank() == 2, "matmul_colblock expects rank-2 tensors");
        require(ta.dim(1) == tw.dim(0) && c0 >= 0 && c1 <= tw.dim(1) && c0 < c1,
                "matmul_colblock: bad block");
        const int m = ta.dim(0), k = ta.dim(1), ldw = tw.dim(1), n = c1 - c0;
        TensorT<S> out({m, n});
        kernels::gemm_nn_colblock(m, k, ta.data.data(), tw.data.data(), ldw, c0, c1,
                                  out.data.data());
        return record("matmul_colblock", {a, w}, std::move(out),
                      [a, w, m, k, ldw, c0, n](TapeT& t, Id o) {
                          const S* g = t.grad_data(o); // [m,n]
                          if (t.node(a).requires_grad) {
                              S* ga = t.grad_buf(a);
                              const S* wd = t.val(w).data.data();
                              for (int i = 0; i < m; ++i)
                                  for (int p = 0; p < k; ++p) {
                                      S acc = S(0);
                                      const S* wrow = wd + static_cast<size_t>(p) * ldw + c0;
                                      const S* grow = g + static_cast<size_t>(i) * n;
                                      for (int j = 0; j < n; ++j) acc += grow[j] * wrow[j];
                                      ga[static_cast<size_t>(i) * k + p] += acc;
                                  }
                          }
                          if (t.node(w).requires_grad) {
                              S* gw = t.grad_buf(w);
                              const S* ad = t.val(a).data.data();
                              for (int p = 0; p < k; ++p) {
                                  S* gwrow = gw + static_cast<size_t>(p) * ldw + c0;
                                  for (int i = 0; i < m; ++i) {
                                      const S av = ad[static_cast<size_t>(i) * k + p];
                                      const S* grow = g + static_cast<size_t>(i) * n;
                                      for (int j = 0; j < n; ++j) gwrow[j] += av * grow[j];
                                  }
                              }
                          }
                      });
    }

    // h[m,r] * W[r0:r1, :] for W[R, n], r = r1-r0
    Id matmul_rowblock(Id h, Id w, int r0, int r1) {
        const auto& th = val(h);
        const auto& tw = val(w);
        require(th.rank() == 2 && tw.rank() == 2, "matmul_rowblock expects rank-2 tensors");
        require(th.dim(1) == r1 - r0 && r0 >= 0 && r1 <= tw.dim(0), "matmul_rowblock: bad block");
        const int m = th.dim(0), r = r1 - r0, n = tw.dim(1);
        TensorT<S> out({m, n});
        const S* wblock = tw.data.data() + static_cast<size_t>(r0) * n;
        kernels::gemm_nn(m, n, r, th.data.data(), wblock, out.data.data());
        return record("matmul_rowblock", {h, w}, std::move(out),
                      [h, w, m, r, n, r0](TapeT& t, Id o) {
                          const S* g = t.grad_data(o); // [m,n]
                          const S* wblock =
                              t.val(w).data.data() + static_cast<size_t>(r0) * n;
                          if (t.node(h).requires_grad)
                              kernels::gemm_nt(m, r, n, g, wblock, t.grad_buf(h), true);
                          if (t.node(w).requires_grad) {
                              S* gw = t.grad_buf(w) + static_cast<size_t>(r0) * n;
                              kernels::gemm_tn(r, n, m, t.val(h).data.data(), g, gw, true);
                          }
                      });
    }

    Id add(Id a, Id b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.shape != tb.shape)
            throw ShapeError("add shape mismatch: " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        TensorT<S> out(ta.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return record("add", {a, b}, std::move(out), [a, b](TapeT& t, Id o) {
            t.accumulate_same(a, o);
            t.accumulate_same(b, o);
        });
    }

    Id sub(Id a, Id b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.shape != tb.shape)
            throw ShapeError("sub shape mismatch: " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        TensorT<S> out(ta.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] - tb.data[i];
        return record("sub", {a, b}, std::move(out), [a, b](TapeT& t, Id o) {
            t.accumulate_same(a, o);
            if (t.node(b).requires_grad) {
                const S* g = t.grad_data(o);
                S* gb = t.grad_buf(b);
                for (size_t i = 0; i < t.val(b).data.size(); ++i) gb[i] -= g[i];
            }
        });
    }

    Id mul(Id a, Id b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.shape != tb.shape)
            throw ShapeError("mul shape mismatch: " + shape_str(ta.shape) + " vs " +
                             shape_str(tb.shape));
        TensorT<S> out(ta.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return record("mul", {a, b}, std::move(out), [a, b](TapeT& t, Id o) {
            const S* g = t.grad_data(o);
            if (t.node(a).requires_grad) {
                S* ga = t.grad_buf(a);
                const auto& vb = t.val(b).data;
                for (size_t i = 0; i < vb.size(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.node(b).requires_grad) {
                S* gb = t.grad_buf(b);
                const auto& va = t.val(a).data;
                for (size_t i = 0; i < va.size(); ++i) gb[i] += g[i] * va[i];
            }
        });
    }

    Id scale(Id a, S c) {
        const auto& ta = val(a);
        TensorT<S> out(ta.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ta.data[i] * c;
        return record("scale", {a}, std::move(out), [a, c](TapeT& t, Id o) {
            if (!t.node(a).requires_grad) return;
            const S* g = t.grad_data(o);
            S* ga = t.grad_buf(a);
            for (size_t i = 0; i < t.val(a).data.size(); ++i) ga[i] += g[i] * c;
        });
    }

    // x[m,n] + v[n] broadcast over rows
    Id add_rowvec(Id x, Id v) {
        const auto& tx = val(x);
        const auto& tv = val(v);
        require(tx.rank() == 2 && tv.rank() == 1 && tx.dim(1) == tv.dim(0),
                "add_rowvec: shape mismatch");
        const int m = tx.dim(0), n = tx.dim(1);
        TensorT<S> out(tx.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at(i, j) = tx.at(i, j) + tv.at(j);
        return record("add_rowvec", {x, v}, std::move(out), [x, v, m, n](TapeT& t, Id o) {
            const S* g = t.grad_data(o);
            t.accumulate_same(x, o);
            if (t.node(v).requires_grad) {
                S* gv = t.grad_buf(v);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += g[static_cast<size_t>(i) * n + j];
            }
        });
    }

    // Additive intervention: x[m,n] + v[n], but components of v that are
    // exactly zero leave x untouched bit for bit. Keeps the zero-vector
    // no-op contract exact even around signed zeros. Same derivative as
    // add_rowvec.
    Id add_steer(Id x, Id v) {
        const auto& tx = val(x);
        const auto& tv = val(v);
        require(tx.rank() == 2 && tv.rank() == 1 && tx.dim(1) == tv.dim(0),
                "add_steer: shape mismatch");
        const int m = tx.dim(0), n = tx.dim(1);
        TensorT<S> out(tx.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const S vj = tv.at(j);
                out.at(i, j) = (vj == S(0)) ? tx.at(i, j) : tx.at(i, j) + vj;
            }
        return record("add_steer", {x, v}, std::move(out), [x, v, m, n](TapeT& t, Id o) {
            const S* g = t.grad_data(o);
            t.accumulate_same(x, o);
            if (t.node(v).requires_grad) {
                S* gv = t.grad_buf(v);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += g[static_cast<size_t>(i) * n + j];
            }
        });
    }

    // x[m,n] + gate[m] * b[n] outer product, with the same exact-zero skip.
    Id add_outer(Id x, Id gate, Id b) {
        const auto& tx = val(x);
        const auto& tg = val(gate);
        const auto& tb = val(b);
        require(tx.rank() == 2 && tg.rank() == 1 && tb.rank() == 1 && tx.dim(0) == tg.dim(0) &&
                    tx.dim(1) == tb.dim(0),
                "add_outer: shape mismatch");
        const int m = tx.dim(0), n = tx.dim(1);
        TensorT<S> out(tx.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const S p = tg.at(i) * tb.at(j);
                out.at(i, j) = (p == S(0)) ? tx.at(i, j) : tx.at(i, j) + p;
            }
        return record("add_outer", {x, gate, b}, std::move(out),
                      [x, gate, b, m, n](TapeT& t, Id o) {
                          const S* g = t.grad_data(o);
                          t.accumulate_same(x, o);
                          if (t.node(gate).requires_grad) {
                              S* gg = t.grad_buf(gate);
                              const auto& vb = t.val(b).data;
                              for (int i = 0; i < m; ++i) {
                                  S acc = S(0);
                                  for (int j = 0; j < n; ++j)
                                      acc += g[static_cast<size_t>(i) * n + j] * vb[j];
                                  gg[i] += acc;
                              }
                          }
                          if (t.node(b).requires_grad) {
                              S* gb = t.grad_buf(b);
                              const auto& vg = t.val(gate).data;
                              for (int i = 0; i < m; ++i)
                                  for (int j = 0; j < n; ++j)
                                      gb[j] += g[static_cast<size_t>(i) * n + j] * vg[i];
                          }
                      });
    }

    // a[m,n] * v[n] -> [m]
    Id matvec(Id a, Id v) {
        const auto& ta = val(a);
        const auto& tv = val(v);
        require(ta.rank() == 2 && tv.rank() == 1 && ta.dim(1) == tv.dim(0),
                "matvec: shape mismatch");
        const int m = ta.dim(0), n = ta.dim(1);
        TensorT<S> out({m});
        for (int i = 0; i < m; ++i) {
            S acc = S(0);
            for (int j = 0; j < n; ++j) acc += ta.at(i, j) * tv.at(j);
            out.at(i) = acc;
        }
        return record("matvec", {a, v}, std::move(out), [a, v, m, n](TapeT& t, Id o) {
            const S* g = t.grad_data(o); // [m]
            if (t.node(a).requires_grad) {
                S* ga = t.grad_buf(a);
                const auto& vv = t.val(v).data;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) ga[static_cast<size_t>(i) * n + j] += g[i] * vv[j];
            }
            if (t.node(v).requires_grad) {
                S* gv = t.grad_buf(v);
                const auto& va = t.val(a);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += g[i] * va.at(i, j);
            }
        });
    }

    Id silu(Id x) {
        const auto& tx = val(x);
        TensorT<S> out(tx.shape);
        kernels::silu(tx.data.size(), tx.data.data(), out.data.data());
        return record("silu", {x}, std::move(out), [x](TapeT& t, Id o) {
            if (!t.node(x).requires_grad) return;
            const S* g = t.grad_data(o);
            S* gx = t.grad_buf(x);
            const auto& vx = t.val(x).data;
            for (size_t i = 0; i < vx.size(); ++i) {
                const S sig = S(1) / (S(1) + std::exp(-vx[i]));
                gx[i] += g[i] * sig * (S(1) + vx[i] * (S(1) - sig));
            }
        });
    }

    Id rms_norm(Id x, Id gain, S eps) {
        const auto& tx = val(x);
        const auto& tg = val(gain);
        require(tx.rank() == 2 && tg.rank() == 1 && tx.dim(1) == tg.dim(0),
                "rms_norm: shape mismatch");
        const int m = tx.dim(0), n = tx.dim(1);
        TensorT<S> out(tx.shape);
        std::vector<S> inv_rms(static_cast<size_t>(m));
        kernels::rms_norm_rows(m, n, tx.data.data(), tg.data.data(), eps, out.data.data(),
                               inv_rms.data());
        return record("rms_norm", {x, gain}, std::move(out),
                      [x, gain, m, n, inv = std::move(inv_rms)](TapeT& t, Id o) {
                          const S* g = t.grad_data(o);
                          const auto& vx = t.val(x);
                          const auto& vg = t.val(gain).data;
                          if (t.node(x).requires_grad) {
                              S* gx = t.grad_buf(x);
                              for (int i = 0; i < m; ++i) {
                                  const S r = inv[static_cast<size_t>(i)];
                                  double dot = 0.0;
                                  const S* grow = g + static_cast<size_t>(i) * n;
                                  for (int j = 0; j < n; ++j)
                                      dot += static_cast<double>(grow[j]) * vg[j] * vx.at(i, j);
                                  const S corr = static_cast<S>(dot) * r * r * r / static_cast<S>(n);
                                  S* gxr = gx + static_cast<size_t>(i) * n;
                                  for (int j = 0; j < n; ++j)
                                      gxr[j] += grow[j] * vg[j] * r - corr * vx.at(i, j);
                              }
                          }
                          if (t.node(gain).requires_grad) {
                              S* gg = t.grad_buf(gain);
                              for (int i = 0; i < m; ++i) {
                                  const S r = inv[static_cast<size_t>(i)];
                                  const S* grow = g + static_cast<size_t>(i) * n;
                                  for (int j = 0; j < n; ++j) gg[j] += grow[j] * vx.at(i, j) * r;
                              }
                          }
                      });
    }

    // Rotary position encoding over rows; row index is the absolute position.
    Id rope(Id x, double base = 10000.0) {
        const auto& tx = val(x);
        require(tx.rank() == 2 && tx.dim(1) % 2 == 0, "rope: needs even row width");
        const int m = tx.dim(0), n = tx.dim(1), half = n / 2;
        std::vector<S> cs(static_cast<size_t>(m) * half), sn(static_cast<size_t>(m) * half);
        rope_tables(m, half, base, cs.data(), sn.data());
        TensorT<S> out(tx.shape);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < half; ++j) {
                const S c = cs[static_cast<size_t>(i) * half + j];
                const S s = sn[static_cast<size_t>(i) * half + j];
                const S x0 = tx.at(i, 2 * j), x1 = tx.at(i, 2 * j + 1);
                out.at(i, 2 * j) = x0 * c - x1 * s;
                out.at(i, 2 * j + 1) = x0 * s + x1 * c;
            }
        return record("rope", {x}, std::move(out),
                      [x, m, half, cs = std::move(cs), sn = std::move(sn)](TapeT& t, Id o) {
                          if (!t.node(x).requires_grad) return;
                          const S* g = t.grad_data(o);
                          S* gx = t.grad_buf(x);
                          const int n = 2 * half;
                          for (int i = 0; i < m; ++i)
                              for (int j = 0; j < half; ++j) {
                                  const S c = cs[static_cast<size_t>(i) * half + j];
                                  const S s = sn[static_cast<size_t>(i) * half + j];
                                  const S g0 = g[static_cast<size_t>(i) * n + 2 * j];
                                  const S g1 = g[static_cast<size_t>(i) * n + 2 * j + 1];
                                  gx[static_cast<size_t>(i) * n + 2 * j] += g0 * c + g1 * s;
                                  gx[static_cast<size_t>(i) * n + 2 * j + 1] += -g0 * s + g1 * c;
                              }
                      });
    }

    // scores[i,j] = scale * <q_i, k_j> for j <= i, else 0
    Id causal_scores(Id q, Id k, S scale) {
        const auto& tq = val(q);
        const auto& tk = val(k);
        require(tq.rank() == 2 && tq.shape == tk.shape, "causal_scores: shape mismatch");
        const int T = tq.dim(0), d = tq.dim(1);
        TensorT<S> out({T, T});
        for (int i = 0; i < T; ++i)
            for (int j = 0; j <= i; ++j) {
                S acc = S(0);
                for (int p = 0; p < d; ++p) acc += tq.at(i, p) * tk.at(j, p);
                out.at(i, j) = acc * scale;
            }
        return record("causal_scores", {q, k}, std::move(out),
                      [q, k, T, d, scale](TapeT& t, Id o) {
                          const S* g = t.grad_data(o);
                          const auto& vq = t.val(q);
                          const auto& vk = t.val(k);
                          if (t.node(q).requires_grad) {
                              S* gq = t.grad_buf(q);
                              for (int i = 0; i < T; ++i)
                                  for (int j = 0; j <= i; ++j) {
                                      const S gs = g[static_cast<size_t>(i) * T + j] * scale;
                                      for (int p = 0; p < d; ++p)
                                          gq[static_cast<size_t>(i) * d + p] += gs * vk.at(j, p);
                                  }
                          }
                          if (t.node(k).requires_grad) {
                              S* gk = t.grad_buf(k);
                              for (int i = 0; i < T; ++i)
                                  for (int j = 0; j <= i; ++j) {
                                      const S gs = g[static_cast<size_t>(i) * T + j] * scale;
                                      for (int p = 0; p < d; ++p)
                                          gk[static_cast<size_t>(j) * d + p] += gs * vq.at(i, p);
                                  }
                          }
                      });
    }

    // row-wise softmax over j <= i; entries above the diagonal are exactly 0
    Id causal_softmax(Id s) {
        const auto& ts = val(s);
        require(ts.rank() == 2 && ts.dim(0) == ts.dim(1), "causal_softmax: square input");
        const int T = ts.dim(0);
        TensorT<S> out({T, T});
        for (int i = 0; i < T; ++i) {
            S mx = ts.at(i, 0);
            for (int j = 1; j <= i; ++j)
                if (ts.at(i, j) > mx) mx = ts.at(i, j);
            double sum = 0.0;
            for (int j = 0; j <= i; ++j) {
                const S e = static_cast<S>(std::exp(static_cast<double>(ts.at(i, j) - mx)));
                out.at(i, j) = e;
                sum += static_cast<double>(e);
            }
            const S inv = static_cast<S>(1.0 / sum);
            for (int j = 0; j <= i; ++j) out.at(i, j) *= inv;
        }
        return record("causal_softmax", {s}, std::move(out), [s, T](TapeT& t, Id o) {
            if (!t.node(s).requires_grad) return;
            const S* g = t.grad_data(o);
            const auto& p = t.val(o);
            S* gs = t.grad_buf(s);
            for (int i = 0; i < T; ++i) {
                double dot = 0.0;
                for (int j = 0; j <= i; ++j)
                    dot += static_cast<double>(g[static_cast<size_t>(i) * T + j]) * p.at(i, j);
                for (int j = 0; j <= i; ++j)
                    gs[static_cast<size_t>(i) * T + j] +=
                        p.at(i, j) * (g[static_cast<size_t>(i) * T + j] - static_cast<S>(dot));
            }
        });
    }

    // softmax over the last axis; max-subtracted, sums accumulated in double
    Id softmax(Id x) {
        const auto& tx = val(x);
        require(tx.rank() >= 1, "softmax: rank >= 1 expected");
        for (S v : tx.data)
            if (std::isnan(v)) throw NumericError("softmax: NaN input");
        const int cols = tx.dim(tx.rank() - 1);
        const int rows = static_cast<int>(tx.numel()) / cols;
        TensorT<S> out = tx;
        kernels::softmax_rows(rows, cols, out.data.data());
        return record("softmax", {x}, std::move(out), [x, rows, cols](TapeT& t, Id o) {
            if (!t.node(x).requires_grad) return;
            const S* g = t.grad_data(o);
            const auto& p = t.val(o).data;
            S* gx = t.grad_buf(x);
            for (int i = 0; i < rows; ++i) {
                double dot = 0.0;
                const size_t off = static_cast<size_t>(i) * cols;
                for (int j = 0; j < cols; ++j) dot += static_cast<double>(g[off + j]) * p[off + j];
                for (int j = 0; j < cols; ++j)
                    gx[off + j] += p[off + j] * (g[off + j] - static_cast<S>(dot));
            }
        });
    }

    // rows of E[V,d] selected by token ids -> [T,d]
    Id embed_rows(Id e, std::vector<int> tokens) {
        const auto& te = val(e);
        require(te.rank() == 2, "embed_rows: rank-2 table expected");
        for (int tok : tokens)
            if (tok < 0 || tok >= te.dim(0))
                throw UsageError("embed_rows: token id " + std::to_string(tok) +
                                 " outside table of " + std::to_string(te.dim(0)));
        const int T = static_cast<int>(tokens.size()), d = te.dim(1);
        TensorT<S> out({T, d});
        for (int i = 0; i < T; ++i)
            for (int j = 0; j < d; ++j) out.at(i, j) = te.at(tokens[static_cast<size_t>(i)], j);
        return record("embed_rows", {e}, std::move(out),
                      [e, T, d, toks = std::move(tokens)](TapeT& t, Id o) {
                          if (!t.node(e).requires_grad) return;
                          const S* g = t.grad_data(o);
                          S* ge = t.grad_buf(e);
                          for (int i = 0; i < T; ++i) {
                              S* row = ge + static_cast<size_t>(toks[static_cast<size_t>(i)]) * d;
                              for (int j = 0; j < d; ++j) row[j] += g[static_cast<size_t>(i) * d + j];
                          }
                      });
    }

    // Mean over rows (targets[i] >= 0) of -log softmax(logits[i])[targets[i]].
    // Rows with target -1 are ignored.
    Id cross_entropy(Id logits, std::vector<int> targets) {
        return nll(logits, std::move(targets), true);
    }

    // Sum over scored rows of log softmax(logits[i])[targets[i]].
    Id seq_log_prob(Id logits, std::vector<int> targets) {
        return nll(logits, std::move(targets), false);
    }

    Id sum(Id a) {
        const auto& ta = val(a);
        double acc = 0.0;
        for (S v : ta.data) acc += static_cast<double>(v);
        TensorT<S> out({1});
        out.at(0) = static_cast<S>(acc);
        return record("sum", {a}, std::move(out), [a](TapeT& t, Id o) {
            if (!t.node(a).requires_grad) return;
            const S g = t.grad_data(o)[0];
            S* ga = t.grad_buf(a);
            for (size_t i = 0; i < t.val(a).data.size(); ++i) ga[i] += g;
        });
    }

    // -------- backward --------

    // Fills gradients for every node that requires grad and is reachable from
    // root. Repeatable: grads are reset first, so replay gives identical
    // results.
    void backward(Id root) {
        const Node& r = check(root);
        if (!recording_) throw UsageError("backward: tape was created in no-grad mode");
        if (r.value().numel() != 1) throw UsageError("backward: root must be a scalar");
        for (auto& n : nodes_) n.grad.clear();
        if (!r.requires_grad) return; // nothing trainable feeds the root
        *grad_buf(root) = S(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            Node& out = nodes_[static_cast<size_t>(it->out)];
            if (!out.requires_grad || out.grad.empty()) continue;
            it->back(*this, it->out);
        }
    }

    // introspection (debugging / tests)
    struct EntryInfo {
        const char* op;
        std::vector<Id> in;
        Id out;
    };
    std::vector<EntryInfo> entry_log() const {
        std::vector<EntryInfo> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back({e.op, e.in, e.out});
        return out;
    }

    // internal accessors used by backward closures
    struct Node {
        TensorT<S> own;
        const TensorT<S>* ext = nullptr;
        bool requires_grad = false;
        std::vector<S> grad;
        const TensorT<S>& value() const { return ext ? *ext : own; }
    };
    Node& node(Id id) { return nodes_[static_cast<size_t>(id)]; }
    S* grad_buf(Id id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) n.grad.assign(n.value().numel(), S(0));
        return n.grad.data();
    }
    const S* grad_data(Id id) const { return nodes_[static_cast<size_t>(id)].grad.data(); }

private:
    struct Entry {
        const char* op;
        std::vector<Id> in;
        Id out;
        std::function<void(TapeT&, Id)> back;
    };

    const Node& check(Id id) const {
        if (id < 0 || id >= static_cast<Id>(nodes_.size()))
            throw UsageError("tape: invalid node id " + std::to_string(id));
        return nodes_[static_cast<size_t>(id)];
    }

    // Rotation tables are pure functions of (position, half, base); cached
    // per thread since the transcendentals dominate small forwards and a
    // shared cache would serialize concurrent rollouts on its lock.
    static void rope_tables(int rows, int half, double base, S* cs, S* sn) {
        struct Entry {
            int rows = 0;
            std::vector<S> cs, sn;
        };
        thread_local std::map<std::pair<int, double>, Entry> cache;
        Entry& e = cache[{half, base}];
        if (e.rows < rows) {
            const int grown = std::max(rows, std::max(64, e.rows * 2));
            e.cs.resize(static_cast<size_t>(grown) * half);
            e.sn.resize(static_cast<size_t>(grown) * half);
            for (int i = 0; i < grown; ++i)
                for (int j = 0; j < half; ++j) {
                    const double theta = i * std::pow(base, -2.0 * j / (2.0 * half));
                    e.cs[static_cast<size_t>(i) * half + j] = static_cast<S>(std::cos(theta));
                    e.sn[static_cast<size_t>(i) * half + j] = static_cast<S>(std::sin(theta));
                }
            e.rows = grown;
        }
        std::copy_n(e.cs.data(), static_cast<size_t>(rows) * half, cs);
        std::copy_n(e.sn.data(), static_cast<size_t>(rows) * half, sn);
    }

    static void require(bool ok, const char* msg) {
        if (!ok) throw ShapeError(msg);
    }

    void accumulate_same(Id target, Id out) {
        if (!node(target).requires_grad) return;
        const S* g = grad_data(out);
        S* gt = grad_buf(target);
        for (size_t i = 0; i < val(target).data.size(); ++i) gt[i] += g[i];
    }

    Id record(const char* op, std::vector<Id> in, TensorT<S> value,
              std::function<void(TapeT&, Id)> back) {
        bool rg = false;
        if (recording_)
            for (Id i : in) rg = rg || nodes_[static_cast<size_t>(i)].requires_grad;
        Node n;
        n.own = std::move(value);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        const Id out = static_cast<Id>(nodes_.size()) - 1;
        if (recording_) entries_.push_back({op, std::move(in), out, std::move(back)});
        return out;
    }

    Id nll(Id logits, std::vector<int> targets, bool mean_negative) {
        const auto& tl = val(logits);
        require(tl.rank() == 2, "cross_entropy: rank-2 logits expected");
        const int T = tl.dim(0), V = tl.dim(1);
        if (static_cast<int>(targets.size()) != T)
            throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(T) + " rows");
        int scored = 0;
        for (int tgt : targets) {
            if (tgt >= V) throw UsageError("cross_entropy: target " + std::to_string(tgt) +
                                           " out of range for vocab " + std::to_string(V));
            if (tgt >= 0) ++scored;
        }
        if (scored == 0) throw UsageError("cross_entropy: no scored rows");
        // softmax probs saved for backward; log-sum accumulated in double
        auto probs = std::make_shared<std::vector<S>>(tl.data);
        kernels::softmax_rows(T, V, probs->data());
        for (S v : tl.data)
            if (std::isnan(v)) throw NumericError("cross_entropy: NaN logit");
        double acc = 0.0;
        for (int i = 0; i < T; ++i) {
            const int tgt = targets[static_cast<size_t>(i)];
            if (tgt < 0) continue;
            acc += std::log(static_cast<double>((*probs)[static_cast<size_t>(i) * V + tgt]));
        }
        TensorT<S> out({1});
        out.at(0) = static_cast<S>(mean_negative ? -acc / scored : acc);
        return record(mean_negative ? "cross_entropy" : "seq_log_prob", {logits}, std::move(out),
                      [logits, T, V, scored, mean_negative, probs,
                       tgts = std::move(targets)](TapeT& t, Id o) {
                          if (!t.node(logits).requires_grad) return;
                          const S g = t.grad_data(o)[0];
                          S* gl = t.grad_buf(logits);
                          for (int i = 0; i < T; ++i) {
                              const int tgt = tgts[static_cast<size_t>(i)];
                              if (tgt < 0) continue;
                              const S* prow = probs->data() + static_cast<size_t>(i) * V;
                              S* grow = gl + static_cast<size_t>(i) * V;
                              if (mean_negative) {
                                  const S c = g / static_cast<S>(scored);
                                  for (int j = 0; j < V; ++j) grow[j] += c * prow[j];
                                  grow[tgt] -= c;
                              } else {
                                  for (int j = 0; j < V; ++j) grow[j] -= g * prow[j];
                                  grow[tgt] += g;
                              }
                          }
                      });
    }

    bool recording_;
    std::vector<Node> nodes_;
    std::vector<Entry> entries_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

} // namespace steerlab
