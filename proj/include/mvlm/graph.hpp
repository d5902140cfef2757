#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mvlm/tensor.hpp"

namespace mvlm {

// Reverse-mode tape over dense tensors. Values are computed eagerly as the
// graph is built; backward() replays registered pull closures in reverse
// creation order. Parameter leaves accumulate their gradients into external
// sink tensors so one tape can be rebuilt per step while gradients land in
// the trainer's buffers.
template <typename S>
class Graph {
public:
    using Id = std::int32_t;
    using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapM = Eigen::Map<Mat>;
    using CMapM = Eigen::Map<const Mat>;

    explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Id input(Tensor<S> v) { return push(std::move(v), false, nullptr); }

    // Parameter leaf. grad accumulates into *sink on backward (sink may be
    // null when the graph is built for inference only).
    Id param(Tensor<S> v, Tensor<S>* sink) {
        const bool ng = grad_enabled_ && sink != nullptr;
        const Id id = push(std::move(v), ng, nullptr);
        if (ng) {
            nodes_[id].pull = [this, id, sink] {
                Tensor<S>& g = nodes_[id].grad;
                if (sink->data.empty()) *sink = Tensor<S>(nodes_[id].value.shape);
                for (std::size_t i = 0; i < g.data.size(); ++i) sink->data[i] += g.data[i];
            };
        }
        return id;
    }

    const Tensor<S>& value(Id id) const { return nodes_[id].value; }

    // ---- elementwise / structural ops ----

    Id add(Id a, Id b) {
        const Tensor<S>& va = val(a);
        const Tensor<S>& vb = val(b);
        require(va.same_shape(vb), "add: shape mismatch " + shape_string(va.shape) + " vs " + shape_string(vb.shape));
        Tensor<S> out = va;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
        const Id id = push(std::move(out), needs(a) || needs(b), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, a, b] {
                const Tensor<S>& g = nodes_[id].grad;
                if (needs(a)) axpy(grad_buf(a), g);
                if (needs(b)) axpy(grad_buf(b), g);
            };
        }
        return id;
    }

    Id scale(Id x, S c) {
        Tensor<S> out = val(x);
        for (auto& v : out.data) v *= c;
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, c] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gx = grad_buf(x);
                for (std::size_t i = 0; i < g.data.size(); ++i) gx.data[i] += c * g.data[i];
            };
        }
        return id;
    }

    Id mul(Id a, Id b) {
        const Tensor<S>& va = val(a);
        const Tensor<S>& vb = val(b);
        require(va.same_shape(vb), "mul: shape mismatch");
        Tensor<S> out = va;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb.data[i];
        const Id id = push(std::move(out), needs(a) || needs(b), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, a, b] {
                const Tensor<S>& g = nodes_[id].grad;
                if (needs(a)) {
                    Tensor<S>& ga = grad_buf(a);
                    const Tensor<S>& vb2 = val(b);
                    for (std::size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * vb2.data[i];
                }
                if (needs(b)) {
                    Tensor<S>& gb = grad_buf(b);
                    const Tensor<S>& va2 = val(a);
                    for (std::size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * va2.data[i];
                }
            };
        }
        return id;
    }

    Id gelu(Id x) {
        const Tensor<S>& vx = val(x);
        Tensor<S> out = vx;
        for (auto& v : out.data) {
            const double z = static_cast<double>(v);
            v = static_cast<S>(0.5 * z * (1.0 + std::erf(z * 0.70710678118654752440)));
        }
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x] {
                const Tensor<S>& g = nodes_[id].grad;
                const Tensor<S>& vx2 = val(x);
                Tensor<S>& gx = grad_buf(x);
                for (std::size_t i = 0; i < g.data.size(); ++i) {
                    const double z = static_cast<double>(vx2.data[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(z * 0.70710678118654752440));
                    const double pdf = std::exp(-0.5 * z * z) * 0.39894228040143267794;
                    gx.data[i] += g.data[i] * static_cast<S>(cdf + z * pdf);
                }
            };
        }
        return id;
    }

    // y = x @ W (+ b), where x is (B,Sq,Din) or (R,Din), W is (Din,Dout).
    Id linear(Id x, Id w, Id b = -1) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vw = val(w);
        require(vw.rank() == 2, "linear: W must be rank 2");
        const std::int64_t din = vw.shape[0], dout = vw.shape[1];
        require(vx.cols() == din, "linear: input cols " + std::to_string(vx.cols()) + " != W rows " + std::to_string(din));
        const std::int64_t r = vx.numel() / din;
        std::vector<std::int64_t> out_shape = vx.shape;
        out_shape.back() = dout;
        Tensor<S> out(out_shape);
        CMapM X(vx.data.data(), r, din);
        CMapM W(vw.data.data(), din, dout);
        MapM Y(out.data.data(), r, dout);
        Y.noalias() = X * W;
        if (b >= 0) {
            const Tensor<S>& vbias = val(b);
            require(vbias.numel() == dout, "linear: bias size mismatch");
            Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>> B(vbias.data.data(), dout);
            Y.rowwise() += B;
        }
        const Id id = push(std::move(out), needs(x) || needs(w) || (b >= 0 && needs(b)), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, w, b, r, din, dout] {
                const Tensor<S>& g = nodes_[id].grad;
                CMapM G(g.data.data(), r, dout);
                if (needs(x)) {
                    CMapM W2(val(w).data.data(), din, dout);
                    MapM GX(grad_buf(x).data.data(), r, din);
                    GX.noalias() += G * W2.transpose();
                }
                if (needs(w)) {
                    CMapM X2(val(x).data.data(), r, din);
                    MapM GW(grad_buf(w).data.data(), din, dout);
                    GW.noalias() += X2.transpose() * G;
                }
                if (b >= 0 && needs(b)) {
                    Tensor<S>& gb = grad_buf(b);
                    Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>> GB(gb.data.data(), dout);
                    GB += G.colwise().sum();
                }
            };
        }
        return id;
    }

    // y[b] = x[b] + p for positional tables p of shape (S,D).
    Id add_positions(Id x, Id p) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vp = val(p);
        require(vx.rank() == 3 && vp.rank() == 2, "add_positions: expected (B,S,D) + (S,D)");
        require(vx.shape[1] == vp.shape[0] && vx.shape[2] == vp.shape[1], "add_positions: shape mismatch");
        Tensor<S> out = vx;
        const std::int64_t per = vp.numel();
        for (std::int64_t b = 0; b < vx.batch(); ++b) {
            S* dst = out.data.data() + b * per;
            for (std::int64_t i = 0; i < per; ++i) dst[i] += vp.data[static_cast<std::size_t>(i)];
        }
        const Id id = push(std::move(out), needs(x) || needs(p), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, p, per] {
                const Tensor<S>& g = nodes_[id].grad;
                if (needs(x)) axpy(grad_buf(x), g);
                if (needs(p)) {
                    Tensor<S>& gp = grad_buf(p);
                    const std::int64_t bsz = val(x).batch();
                    for (std::int64_t b = 0; b < bsz; ++b) {
                        const S* src = g.data.data() + b * per;
                        for (std::int64_t i = 0; i < per; ++i) gp.data[static_cast<std::size_t>(i)] += src[i];
                    }
                }
            };
        }
        return id;
    }

    // Prepends a broadcast row (the [CLS] embedding): (B,S,D)+(D) -> (B,S+1,D).
    Id prepend_row(Id x, Id vec) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vv = val(vec);
        require(vx.rank() == 3 && vv.numel() == vx.shape[2], "prepend_row: shape mismatch");
        const std::int64_t bsz = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
        Tensor<S> out({bsz, s + 1, d});
        for (std::int64_t b = 0; b < bsz; ++b) {
            S* dst = out.batch_ptr(b);
            std::copy(vv.data.begin(), vv.data.end(), dst);
            std::copy(vx.batch_ptr(b), vx.batch_ptr(b) + s * d, dst + d);
        }
        const Id id = push(std::move(out), needs(x) || needs(vec), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, vec, bsz, s, d] {
                const Tensor<S>& g = nodes_[id].grad;
                if (needs(vec)) {
                    Tensor<S>& gv = grad_buf(vec);
                    for (std::int64_t b = 0; b < bsz; ++b) {
                        const S* src = g.batch_ptr(b);
                        for (std::int64_t i = 0; i < d; ++i) gv.data[static_cast<std::size_t>(i)] += src[i];
                    }
                }
                if (needs(x)) {
                    Tensor<S>& gx = grad_buf(x);
                    for (std::int64_t b = 0; b < bsz; ++b) {
                        const S* src = g.batch_ptr(b) + d;
                        S* dst = gx.batch_ptr(b);
                        for (std::int64_t i = 0; i < s * d; ++i) dst[i] += src[i];
                    }
                }
            };
        }
        return id;
    }

    // Replaces rows with visibility 0 by the shared fill vector.
    Id mask_rows(Id x, const MaskTensor& visible, Id fill) {
        const Tensor<S>& vx = val(x);
        const Tensor<S>& vf = val(fill);
        require(vx.rank() == 3, "mask_rows: expected (B,S,D)");
        require(visible.rows() == vx.shape[0] && visible.cols() == vx.shape[1], "mask_rows: mask shape mismatch");
        require(vf.numel() == vx.shape[2], "mask_rows: fill width mismatch");
        const std::int64_t bsz = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
        Tensor<S> out = vx;
        MaskTensor vis = visible;
        for (std::int64_t b = 0; b < bsz; ++b) {
            for (std::int64_t i = 0; i < s; ++i) {
                if (!vis.data[static_cast<std::size_t>(b * s + i)]) {
                    std::copy(vf.data.begin(), vf.data.end(), out.batch_ptr(b) + i * d);
                }
            }
        }
        const Id id = push(std::move(out), needs(x) || needs(fill), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, fill, vis = std::move(vis), bsz, s, d] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>* gx = needs(x) ? &grad_buf(x) : nullptr;
                Tensor<S>* gf = needs(fill) ? &grad_buf(fill) : nullptr;
                for (std::int64_t b = 0; b < bsz; ++b) {
                    for (std::int64_t i = 0; i < s; ++i) {
                        const S* src = g.batch_ptr(b) + i * d;
                        if (vis.data[static_cast<std::size_t>(b * s + i)]) {
                            if (gx) {
                                S* dst = gx->batch_ptr(b) + i * d;
                                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                            }
                        } else if (gf) {
                            for (std::int64_t j = 0; j < d; ++j) gf->data[static_cast<std::size_t>(j)] += src[j];
                        }
                    }
                }
            };
        }
        return id;
    }

    // Token embedding lookup: table (V,D) + ids (B,S) -> (B,S,D).
    Id embed(Id table, const IndexTensor& ids) {
        const Tensor<S>& vt = val(table);
        require(vt.rank() == 2, "embed: table must be rank 2");
        const std::int64_t v = vt.shape[0], d = vt.shape[1];
        const std::int64_t bsz = ids.rows(), s = ids.cols();
        Tensor<S> out({bsz, s, d});
        for (std::int64_t b = 0; b < bsz; ++b) {
            for (std::int64_t i = 0; i < s; ++i) {
                const std::int32_t tok = ids.data[static_cast<std::size_t>(b * s + i)];
                if (tok < 0 || tok >= v) {
                    throw std::out_of_range("embed: token id " + std::to_string(tok) + " outside vocabulary of " + std::to_string(v));
                }
                std::copy(vt.data.begin() + tok * d, vt.data.begin() + (tok + 1) * d, out.batch_ptr(b) + i * d);
            }
        }
        const Id id = push(std::move(out), needs(table), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, table, ids, bsz, s, d] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gt = grad_buf(table);
                for (std::int64_t b = 0; b < bsz; ++b) {
                    for (std::int64_t i = 0; i < s; ++i) {
                        const std::int32_t tok = ids.data[static_cast<std::size_t>(b * s + i)];
                        const S* src = g.batch_ptr(b) + i * d;
                        S* dst = gt.data.data() + tok * d;
                        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                    }
                }
            };
        }
        return id;
    }

    Id layer_norm(Id x, Id gamma, Id beta) {
        constexpr double kEps = 1e-5;
        const Tensor<S>& vx = val(x);
        const std::int64_t d = vx.cols();
        require(val(gamma).numel() == d && val(beta).numel() == d, "layer_norm: scale/shift width mismatch");
        const std::int64_t r = vx.numel() / d;
        Tensor<S> out(vx.shape);
        Tensor<S> xhat(vx.shape);
        std::vector<S> inv_std(static_cast<std::size_t>(r));
        const S* gm = val(gamma).data.data();
        const S* bt = val(beta).data.data();
        for (std::int64_t i = 0; i < r; ++i) {
            const S* row = vx.data.data() + i * d;
            double mu = 0.0;
            for (std::int64_t j = 0; j < d; ++j) mu += row[j];
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const double c = static_cast<double>(row[j]) - mu;
                var += c * c;
            }
            var /= static_cast<double>(d);
            const double istd = 1.0 / std::sqrt(var + kEps);
            inv_std[static_cast<std::size_t>(i)] = static_cast<S>(istd);
            S* xh = xhat.data.data() + i * d;
            S* yo = out.data.data() + i * d;
            for (std::int64_t j = 0; j < d; ++j) {
                xh[j] = static_cast<S>((static_cast<double>(row[j]) - mu) * istd);
                yo[j] = gm[j] * xh[j] + bt[j];
            }
        }
        const Id id = push(std::move(out), needs(x) || needs(gamma) || needs(beta), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, gamma, beta, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
                const Tensor<S>& g = nodes_[id].grad;
                const S* gm = val(gamma).data.data();
                Tensor<S>* gx = needs(x) ? &grad_buf(x) : nullptr;
                Tensor<S>* gg = needs(gamma) ? &grad_buf(gamma) : nullptr;
                Tensor<S>* gb = needs(beta) ? &grad_buf(beta) : nullptr;
                for (std::int64_t i = 0; i < r; ++i) {
                    const S* gy = g.data.data() + i * d;
                    const S* xh = xhat.data.data() + i * d;
                    if (gg || gb) {
                        for (std::int64_t j = 0; j < d; ++j) {
                            if (gg) gg->data[static_cast<std::size_t>(j)] += gy[j] * xh[j];
                            if (gb) gb->data[static_cast<std::size_t>(j)] += gy[j];
                        }
                    }
                    if (gx) {
                        double sum_g = 0.0, sum_gx = 0.0;
                        for (std::int64_t j = 0; j < d; ++j) {
                            const double gj = static_cast<double>(gy[j]) * static_cast<double>(gm[j]);
                            sum_g += gj;
                            sum_gx += gj * static_cast<double>(xh[j]);
                        }
                        const double inv_d = 1.0 / static_cast<double>(d);
                        const double istd = static_cast<double>(inv_std[static_cast<std::size_t>(i)]);
                        S* dst = gx->data.data() + i * d;
                        for (std::int64_t j = 0; j < d; ++j) {
                            const double gj = static_cast<double>(gy[j]) * static_cast<double>(gm[j]);
                            dst[j] += static_cast<S>(istd * (gj - inv_d * sum_g - static_cast<double>(xh[j]) * inv_d * sum_gx));
                        }
                    }
                }
            };
        }
        return id;
    }

    // Multi-head scaled dot-product attention. q:(B,Sq,D), k/v:(B,Sk,D).
    // kv_allowed marks keys that may be attended to (pad masking); causal
    // additionally restricts key j <= query i (requires Sq == Sk).
    Id attention(Id q, Id k, Id v, std::int64_t n_heads, const MaskTensor* kv_allowed = nullptr, bool causal = false) {
        const Tensor<S>& vq = val(q);
        const Tensor<S>& vk = val(k);
        const Tensor<S>& vv = val(v);
        require(vq.rank() == 3 && vk.rank() == 3 && vv.rank() == 3, "attention: expected rank-3 inputs");
        const std::int64_t bsz = vq.shape[0], sq = vq.shape[1], d = vq.shape[2], sk = vk.shape[1];
        require(vk.shape[0] == bsz && vv.shape[0] == bsz, "attention: batch mismatch");
        require(vk.shape[2] == d && vv.shape[2] == d && vv.shape[1] == sk, "attention: dim mismatch");
        require(d % n_heads == 0, "attention: dim not divisible by heads");
        if (causal) require(sq == sk, "attention: causal requires square attention");
        if (kv_allowed) {
            require(kv_allowed->rows() == bsz && kv_allowed->cols() == sk, "attention: kv mask shape mismatch");
        }
        const std::int64_t hd = d / n_heads;
        const S scale_f = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

        std::vector<S> qp, kp, vp;
        pack_heads(vq, n_heads, qp);
        pack_heads(vk, n_heads, kp);
        pack_heads(vv, n_heads, vp);

        // probs per (b,h): Sq x Sk
        std::vector<S> probs(static_cast<std::size_t>(bsz * n_heads * sq * sk));
        Tensor<S> out(vq.shape);
        std::vector<S> op(static_cast<std::size_t>(bsz * n_heads * sq * hd));
        for (std::int64_t b = 0; b < bsz; ++b) {
            const std::uint8_t* allow = kv_allowed ? kv_allowed->data.data() + b * sk : nullptr;
            if (allow) {
                bool any = false;
                for (std::int64_t j = 0; j < sk; ++j) any = any || allow[j];
                require(any, "attention: a batch row masks out every key");
            }
            for (std::int64_t h = 0; h < n_heads; ++h) {
                const std::int64_t slot = b * n_heads + h;
                CMapM Q(qp.data() + slot * sq * hd, sq, hd);
                CMapM K(kp.data() + slot * sk * hd, sk, hd);
                CMapM V(vp.data() + slot * sk * hd, sk, hd);
                MapM P(probs.data() + slot * sq * sk, sq, sk);
                P.noalias() = Q * K.transpose() * scale_f;
                for (std::int64_t i = 0; i < sq; ++i) {
                    S* row = P.data() + i * sk;
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::int64_t j = 0; j < sk; ++j) {
                        const bool ok = (!allow || allow[j]) && (!causal || j <= i);
                        if (!ok) continue;
                        mx = std::max(mx, static_cast<double>(row[j]));
                    }
                    double denom = 0.0;
                    for (std::int64_t j = 0; j < sk; ++j) {
                        const bool ok = (!allow || allow[j]) && (!causal || j <= i);
                        if (ok) {
                            const double e = std::exp(static_cast<double>(row[j]) - mx);
                            row[j] = static_cast<S>(e);
                            denom += e;
                        } else {
                            row[j] = S(0);
                        }
                    }
                    const S inv = static_cast<S>(1.0 / denom);
                    for (std::int64_t j = 0; j < sk; ++j) row[j] *= inv;
                }
                MapM O(op.data() + slot * sq * hd, sq, hd);
                O.noalias() = P * V;
            }
        }
        unpack_heads(op, bsz, sq, d, n_heads, out);

        const Id id = push(std::move(out), needs(q) || needs(k) || needs(v), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, q, k, v, n_heads, bsz, sq, sk, d, hd, scale_f, probs = std::move(probs)] {
                const Tensor<S>& g = nodes_[id].grad;
                std::vector<S> gop;
                pack_heads(g, n_heads, gop);
                std::vector<S> qp2, kp2, vp2;
                pack_heads(val(q), n_heads, qp2);
                pack_heads(val(k), n_heads, kp2);
                pack_heads(val(v), n_heads, vp2);
                std::vector<S> gq(qp2.size(), S(0)), gk(kp2.size(), S(0)), gv(vp2.size(), S(0));
                Mat dp(sq, sk), ds(sq, sk);
                for (std::int64_t slot = 0; slot < bsz * n_heads; ++slot) {
                    CMapM P(probs.data() + slot * sq * sk, sq, sk);
                    CMapM GO(gop.data() + slot * sq * hd, sq, hd);
                    CMapM Q(qp2.data() + slot * sq * hd, sq, hd);
                    CMapM K(kp2.data() + slot * sk * hd, sk, hd);
                    CMapM V(vp2.data() + slot * sk * hd, sk, hd);
                    MapM GQ(gq.data() + slot * sq * hd, sq, hd);
                    MapM GK(gk.data() + slot * sk * hd, sk, hd);
                    MapM GV(gv.data() + slot * sk * hd, sk, hd);
                    GV.noalias() += P.transpose() * GO;
                    dp.noalias() = GO * V.transpose();
                    // softmax backward: ds = P .* (dp - rowsum(dp .* P))
                    for (std::int64_t i = 0; i < sq; ++i) {
                        const S dot = (dp.row(i).array() * P.row(i).array()).sum();
                        ds.row(i) = P.row(i).array() * (dp.row(i).array() - dot);
                    }
                    GQ.noalias() += ds * K * scale_f;
                    GK.noalias() += ds.transpose() * Q * scale_f;
                }
                if (needs(q)) unpack_heads_add(gq, bsz, sq, d, n_heads, grad_buf(q));
                if (needs(k)) unpack_heads_add(gk, bsz, sk, d, n_heads, grad_buf(k));
                if (needs(v)) unpack_heads_add(gv, bsz, sk, d, n_heads, grad_buf(v));
            };
        }
        return id;
    }

    // Selects one row per batch item: (B,S,D) -> (B,D).
    Id row(Id x, std::int64_t r) {
        const Tensor<S>& vx = val(x);
        require(vx.rank() == 3 && r >= 0 && r < vx.shape[1], "row: index out of range");
        const std::int64_t bsz = vx.shape[0], d = vx.shape[2];
        Tensor<S> out({bsz, d});
        for (std::int64_t b = 0; b < bsz; ++b) {
            std::copy(vx.batch_ptr(b) + r * d, vx.batch_ptr(b) + (r + 1) * d, out.data.data() + b * d);
        }
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, r, bsz, d] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gx = grad_buf(x);
                for (std::int64_t b = 0; b < bsz; ++b) {
                    const S* src = g.data.data() + b * d;
                    S* dst = gx.batch_ptr(b) + r * d;
                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                }
            };
        }
        return id;
    }

    // Drops the leading (class-token) row: (B,S,D) -> (B,S-1,D).
    Id drop_row0(Id x) {
        const Tensor<S>& vx = val(x);
        require(vx.rank() == 3 && vx.shape[1] >= 2, "drop_row0: too few rows");
        const std::int64_t bsz = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
        Tensor<S> out({bsz, s - 1, d});
        for (std::int64_t b = 0; b < bsz; ++b) {
            std::copy(vx.batch_ptr(b) + d, vx.batch_ptr(b) + s * d, out.batch_ptr(b));
        }
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, bsz, s, d] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gx = grad_buf(x);
                for (std::int64_t b = 0; b < bsz; ++b) {
                    const S* src = g.batch_ptr(b);
                    S* dst = gx.batch_ptr(b) + d;
                    for (std::int64_t i = 0; i < (s - 1) * d; ++i) dst[i] += src[i];
                }
            };
        }
        return id;
    }

    // Unit-normalizes each row; throws on degenerate (near-zero) rows.
    Id l2_normalize(Id x) {
        const Tensor<S>& vx = val(x);
        const std::int64_t d = vx.cols();
        const std::int64_t r = vx.numel() / d;
        Tensor<S> out(vx.shape);
        std::vector<S> inv_norm(static_cast<std::size_t>(r));
        for (std::int64_t i = 0; i < r; ++i) {
            const S* row = vx.data.data() + i * d;
            double n2 = 0.0;
            for (std::int64_t j = 0; j < d; ++j) n2 += static_cast<double>(row[j]) * static_cast<double>(row[j]);
            const double n = std::sqrt(n2);
            if (n < 1e-12) throw std::domain_error("l2_normalize: degenerate zero vector");
            const double inv = 1.0 / n;
            inv_norm[static_cast<std::size_t>(i)] = static_cast<S>(inv);
            S* dst = out.data.data() + i * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] = static_cast<S>(row[j] * inv);
        }
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, r, d, inv_norm = std::move(inv_norm)] {
                const Tensor<S>& g = nodes_[id].grad;
                const Tensor<S>& y = nodes_[id].value;
                Tensor<S>& gx = grad_buf(x);
                for (std::int64_t i = 0; i < r; ++i) {
                    const S* gy = g.data.data() + i * d;
                    const S* z = y.data.data() + i * d;
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < d; ++j) dot += static_cast<double>(gy[j]) * static_cast<double>(z[j]);
                    const double inv = static_cast<double>(inv_norm[static_cast<std::size_t>(i)]);
                    S* dst = gx.data.data() + i * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        dst[j] += static_cast<S>(inv * (static_cast<double>(gy[j]) - dot * static_cast<double>(z[j])));
                    }
                }
            };
        }
        return id;
    }

    // Rows [from, from+len) of a rank-2 tensor.
    Id slice_rows(Id x, std::int64_t from, std::int64_t len) {
        const Tensor<S>& vx = val(x);
        require(vx.rank() == 2 && from >= 0 && len >= 1 && from + len <= vx.shape[0], "slice_rows: range out of bounds");
        const std::int64_t c = vx.shape[1];
        Tensor<S> out({len, c});
        std::copy(vx.data.begin() + from * c, vx.data.begin() + (from + len) * c, out.data.begin());
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, from, len, c] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gx = grad_buf(x);
                for (std::int64_t i = 0; i < len * c; ++i) gx.data[static_cast<std::size_t>(from * c + i)] += g.data[static_cast<std::size_t>(i)];
            };
        }
        return id;
    }

    Id concat_cols(Id a, Id b) {
        const Tensor<S>& va = val(a);
        const Tensor<S>& vb = val(b);
        require(va.rank() == 2 && vb.rank() == 2 && va.shape[0] == vb.shape[0], "concat_cols: shape mismatch");
        const std::int64_t r = va.shape[0], da = va.shape[1], db = vb.shape[1];
        Tensor<S> out({r, da + db});
        for (std::int64_t i = 0; i < r; ++i) {
            std::copy(va.data.begin() + i * da, va.data.begin() + (i + 1) * da, out.data.begin() + i * (da + db));
            std::copy(vb.data.begin() + i * db, vb.data.begin() + (i + 1) * db, out.data.begin() + i * (da + db) + da);
        }
        const Id id = push(std::move(out), needs(a) || needs(b), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, a, b, r, da, db] {
                const Tensor<S>& g = nodes_[id].grad;
                for (std::int64_t i = 0; i < r; ++i) {
                    const S* src = g.data.data() + i * (da + db);
                    if (needs(a)) {
                        S* dst = grad_buf(a).data.data() + i * da;
                        for (std::int64_t j = 0; j < da; ++j) dst[j] += src[j];
                    }
                    if (needs(b)) {
                        S* dst = grad_buf(b).data.data() + i * db;
                        for (std::int64_t j = 0; j < db; ++j) dst[j] += src[da + j];
                    }
                }
            };
        }
        return id;
    }

    // Gathers batch items (with repetition) into a new batch dimension.
    Id gather_batch(Id x, std::vector<std::int32_t> indices) {
        const Tensor<S>& vx = val(x);
        require(vx.rank() == 3, "gather_batch: expected rank-3 input");
        const std::int64_t bsz = vx.shape[0], s = vx.shape[1], d = vx.shape[2];
        const auto gsz = static_cast<std::int64_t>(indices.size());
        Tensor<S> out({gsz, s, d});
        for (std::int64_t gidx = 0; gidx < gsz; ++gidx) {
            const std::int32_t src = indices[static_cast<std::size_t>(gidx)];
            require(src >= 0 && src < bsz, "gather_batch: index out of range");
            std::copy(vx.batch_ptr(src), vx.batch_ptr(src) + s * d, out.batch_ptr(gidx));
        }
        const Id id = push(std::move(out), needs(x), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, x, indices = std::move(indices), s, d] {
                const Tensor<S>& g = nodes_[id].grad;
                Tensor<S>& gx = grad_buf(x);
                for (std::size_t gidx = 0; gidx < indices.size(); ++gidx) {
                    const S* src = g.batch_ptr(static_cast<std::int64_t>(gidx));
                    S* dst = gx.batch_ptr(indices[gidx]);
                    for (std::int64_t i = 0; i < s * d; ++i) dst[i] += src[i];
                }
            };
        }
        return id;
    }

    // ---- losses (return scalar nodes) ----

    // Mean cross-entropy over rows of logits (leading dims flattened)
    // against integer labels.
    Id softmax_cross_entropy(Id logits, const IndexTensor& labels) {
        const Tensor<S>& vl = val(logits);
        const std::int64_t c = vl.cols();
        const std::int64_t r = vl.numel() / c;
        require(static_cast<std::int64_t>(labels.data.size()) == r, "softmax_cross_entropy: label count mismatch");
        Tensor<S> probs(vl.shape);
        double total = 0.0;
        for (std::int64_t i = 0; i < r; ++i) {
            const S* row = vl.data.data() + i * c;
            const std::int32_t y = labels.data[static_cast<std::size_t>(i)];
            require(y >= 0 && y < c, "softmax_cross_entropy: label out of range");
            total += softmax_row_ce(row, c, y, probs.data.data() + i * c);
        }
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(r)));
        const Id id = push(std::move(out), needs(logits), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, logits, labels, r, c, probs = std::move(probs)] {
                const S gout = nodes_[id].grad.data[0];
                Tensor<S>& gl = grad_buf(logits);
                const S inv = static_cast<S>(1.0 / static_cast<double>(r)) * gout;
                for (std::int64_t i = 0; i < r; ++i) {
                    const S* p = probs.data.data() + i * c;
                    S* dst = gl.data.data() + i * c;
                    const std::int32_t y = labels.data[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < c; ++j) dst[j] += inv * (p[j] - S(j == y));
                }
            };
        }
        return id;
    }

    // Mean cross-entropy over masked token positions of (B,S,V) logits.
    Id masked_token_cross_entropy(Id logits, const IndexTensor& targets, const MaskTensor& mask,
                                  const std::vector<double>* row_weights = nullptr) {
        const Tensor<S>& vl = val(logits);
        require(vl.rank() == 3, "masked_token_cross_entropy: logits must be rank 3");
        const std::int64_t bsz = vl.shape[0], s = vl.shape[1], vsz = vl.shape[2];
        require(targets.rows() == bsz && targets.cols() == s, "masked_token_cross_entropy: target shape mismatch");
        require(mask.rows() == bsz && mask.cols() == s, "masked_token_cross_entropy: mask shape mismatch");
        struct Pos { std::int64_t b, i; std::int32_t y; double w; };
        std::vector<Pos> sel;
        for (std::int64_t b = 0; b < bsz; ++b) {
            for (std::int64_t i = 0; i < s; ++i) {
                if (mask.data[static_cast<std::size_t>(b * s + i)]) {
                    const std::int32_t y = targets.data[static_cast<std::size_t>(b * s + i)];
                    require(y >= 0 && y < vsz, "masked_token_cross_entropy: target out of range");
                    const double w = row_weights ? (*row_weights)[static_cast<std::size_t>(b * s + i)] : 1.0;
                    sel.push_back({b, i, y, w});
                }
            }
        }
        if (sel.empty()) throw std::invalid_argument("masked_token_cross_entropy: zero masked positions");
        double wsum = 0.0;
        for (const auto& p : sel) wsum += p.w;
        Tensor<S> probs({static_cast<std::int64_t>(sel.size()), vsz});
        double total = 0.0;
        for (std::size_t n = 0; n < sel.size(); ++n) {
            const S* row = vl.batch_ptr(sel[n].b) + sel[n].i * vsz;
            total += sel[n].w * softmax_row_ce(row, vsz, sel[n].y, probs.data.data() + static_cast<std::int64_t>(n) * vsz);
        }
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / wsum));
        const Id id = push(std::move(out), needs(logits), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, logits, vsz, wsum, sel = std::move(sel), probs = std::move(probs)] {
                const S gout = nodes_[id].grad.data[0];
                Tensor<S>& gl = grad_buf(logits);
                for (std::size_t n = 0; n < sel.size(); ++n) {
                    const S* p = probs.data.data() + static_cast<std::int64_t>(n) * vsz;
                    S* dst = gl.batch_ptr(sel[n].b) + sel[n].i * vsz;
                    const S w = static_cast<S>(sel[n].w / wsum) * gout;
                    for (std::int64_t j = 0; j < vsz; ++j) dst[j] += w * (p[j] - S(j == sel[n].y));
                }
            };
        }
        return id;
    }

    // L1 over rows selected by mask, normalized by masked element count.
    Id masked_l1(Id pred, const Tensor<S>& target, const MaskTensor& row_mask) {
        const Tensor<S>& vp = val(pred);
        require(vp.shape == target.shape, "masked_l1: target shape mismatch");
        require(vp.rank() == 3, "masked_l1: expected rank-3 prediction");
        const std::int64_t bsz = vp.shape[0], n = vp.shape[1], p = vp.shape[2];
        require(row_mask.rows() == bsz && row_mask.cols() == n, "masked_l1: mask shape mismatch");
        std::int64_t count = 0;
        for (auto m : row_mask.data) count += (m != 0);
        if (count == 0) throw std::invalid_argument("masked_l1: zero masked rows");
        const double omega = static_cast<double>(count * p);
        double total = 0.0;
        for (std::int64_t b = 0; b < bsz; ++b) {
            for (std::int64_t i = 0; i < n; ++i) {
                if (!row_mask.data[static_cast<std::size_t>(b * n + i)]) continue;
                const S* pr = vp.batch_ptr(b) + i * p;
                const S* tr = target.batch_ptr(b) + i * p;
                for (std::int64_t j = 0; j < p; ++j) total += std::abs(static_cast<double>(pr[j]) - static_cast<double>(tr[j]));
            }
        }
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / omega));
        const Id id = push(std::move(out), needs(pred), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, pred, target, row_mask, bsz, n, p, omega] {
                const S gout = nodes_[id].grad.data[0];
                const Tensor<S>& vp2 = val(pred);
                Tensor<S>& gp = grad_buf(pred);
                const S inv = static_cast<S>(1.0 / omega) * gout;
                for (std::int64_t b = 0; b < bsz; ++b) {
                    for (std::int64_t i = 0; i < n; ++i) {
                        if (!row_mask.data[static_cast<std::size_t>(b * n + i)]) continue;
                        const S* pr = vp2.batch_ptr(b) + i * p;
                        const S* tr = target.batch_ptr(b) + i * p;
                        S* dst = gp.batch_ptr(b) + i * p;
                        for (std::int64_t j = 0; j < p; ++j) {
                            const S diff = pr[j] - tr[j];
                            dst[j] += inv * S((diff > S(0)) - (diff < S(0)));
                        }
                    }
                }
            };
        }
        return id;
    }

    // Symmetric contrastive loss over unit-normalized projections.
    // inv_temp multiplies the similarity matrix; when log_temp >= 0 it is a
    // scalar node holding log(tau) and receives a gradient.
    Id contrastive_loss(Id zi, Id zt, double fixed_temp, Id log_temp = -1) {
        const Tensor<S>& vi = val(zi);
        const Tensor<S>& vt = val(zt);
        require(vi.rank() == 2 && vt.rank() == 2 && vi.shape == vt.shape, "contrastive_loss: shape mismatch");
        const std::int64_t n = vi.shape[0], p = vi.shape[1];
        double temp = fixed_temp;
        if (log_temp >= 0) temp = std::exp(static_cast<double>(val(log_temp).data[0]));
        require(temp > 0.0, "contrastive_loss: temperature must be positive");
        const double inv_temp = 1.0 / temp;
        Tensor<S> sim({n, n});
        {
            CMapM Zi(vi.data.data(), n, p);
            CMapM Zt(vt.data.data(), n, p);
            MapM Sm(sim.data.data(), n, n);
            Sm.noalias() = Zi * Zt.transpose() * static_cast<S>(inv_temp);
        }
        Tensor<S> prow({n, n}), pcol({n, n});
        double total = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            total += softmax_row_ce(sim.data.data() + i * n, n, static_cast<std::int32_t>(i), prow.data.data() + i * n);
        }
        {
            std::vector<S> col(static_cast<std::size_t>(n)), pc(static_cast<std::size_t>(n));
            for (std::int64_t j = 0; j < n; ++j) {
                for (std::int64_t i = 0; i < n; ++i) col[static_cast<std::size_t>(i)] = sim.data[static_cast<std::size_t>(i * n + j)];
                total += softmax_row_ce(col.data(), n, static_cast<std::int32_t>(j), pc.data());
                for (std::int64_t i = 0; i < n; ++i) pcol.data[static_cast<std::size_t>(i * n + j)] = pc[static_cast<std::size_t>(i)];
            }
        }
        Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / static_cast<double>(n)));
        const Id id = push(std::move(out), needs(zi) || needs(zt) || (log_temp >= 0 && needs(log_temp)), nullptr);
        if (nodes_[id].needs_grad) {
            nodes_[id].pull = [this, id, zi, zt, log_temp, n, p, inv_temp,
                               sim = std::move(sim), prow = std::move(prow), pcol = std::move(pcol)] {
                const S gout = nodes_[id].grad.data[0];
                // dL/dSim = (1/n) (Prow - I + Pcol - I)
                Tensor<S> dsim({n, n});
                const S invn = static_cast<S>(1.0 / static_cast<double>(n)) * gout;
                for (std::int64_t i = 0; i < n; ++i) {
                    for (std::int64_t j = 0; j < n; ++j) {
                        const auto ix = static_cast<std::size_t>(i * n + j);
                        dsim.data[ix] = invn * (prow.data[ix] + pcol.data[ix] - S(2 * (i == j)));
                    }
                }
                CMapM D(dsim.data.data(), n, n);
                if (needs(zi)) {
                    CMapM Zt2(val(zt).data.data(), n, p);
                    MapM G(grad_buf(zi).data.data(), n, p);
                    G.noalias() += D * Zt2 * static_cast<S>(inv_temp);
                }
                if (needs(zt)) {
                    CMapM Zi2(val(zi).data.data(), n, p);
                    MapM G(grad_buf(zt).data.data(), n, p);
                    G.noalias() += D.transpose() * Zi2 * static_cast<S>(inv_temp);
                }
                if (log_temp >= 0 && needs(log_temp)) {
                    // sim = raw / tau, d sim / d log_tau = -sim
                    double acc = 0.0;
                    for (std::size_t ix = 0; ix < dsim.data.size(); ++ix) {
                        acc -= static_cast<double>(dsim.data[ix]) * static_cast<double>(sim.data[ix]);
                    }
                    grad_buf(log_temp).data[0] += static_cast<S>(acc);
                }
            };
        }
        return id;
    }

    void backward(Id loss) {
        require(val(loss).numel() == 1, "backward: loss must be scalar");
        require(grad_enabled_, "backward: graph built without gradients");
        grad_buf(loss).data[0] = S(1);
        for (Id id = loss; id >= 0; --id) {
            Node& nd = nodes_[id];
            if (nd.needs_grad && !nd.grad.data.empty() && nd.pull) nd.pull();
        }
    }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        bool needs_grad = false;
        std::function<void()> pull;
    };

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument(msg);
    }

    const Tensor<S>& val(Id id) const { return nodes_[id].value; }
    bool needs(Id id) const { return nodes_[id].needs_grad; }

    Tensor<S>& grad_buf(Id id) {
        Node& nd = nodes_[id];
        if (nd.grad.data.empty()) nd.grad = Tensor<S>(nd.value.shape);
        return nd.grad;
    }

    static void axpy(Tensor<S>& dst, const Tensor<S>& src) {
        for (std::size_t i = 0; i < src.data.size(); ++i) dst.data[i] += src.data[i];
    }

    // (B,Sq,D) -> per-(b,h) contiguous (Sq,hd) buffers.
    static void pack_heads(const Tensor<S>& x, std::int64_t n_heads, std::vector<S>& out) {
        const std::int64_t bsz = x.shape[0], s = x.shape[1], d = x.shape[2], hd = d / n_heads;
        out.resize(static_cast<std::size_t>(bsz * n_heads * s * hd));
        for (std::int64_t b = 0; b < bsz; ++b) {
            const S* src = x.batch_ptr(b);
            for (std::int64_t i = 0; i < s; ++i) {
                for (std::int64_t h = 0; h < n_heads; ++h) {
                    S* dst = out.data() + ((b * n_heads + h) * s + i) * hd;
                    std::copy(src + i * d + h * hd, src + i * d + (h + 1) * hd, dst);
                }
            }
        }
    }

    static void unpack_heads(const std::vector<S>& packed, std::int64_t bsz, std::int64_t s, std::int64_t d,
                             std::int64_t n_heads, Tensor<S>& out) {
        const std::int64_t hd = d / n_heads;
        for (std::int64_t b = 0; b < bsz; ++b) {
            S* dst = out.batch_ptr(b);
            for (std::int64_t i = 0; i < s; ++i) {
                for (std::int64_t h = 0; h < n_heads; ++h) {
                    const S* src = packed.data() + ((b * n_heads + h) * s + i) * hd;
                    std::copy(src, src + hd, dst + i * d + h * hd);
                }
            }
        }
    }

    static void unpack_heads_add(const std::vector<S>& packed, std::int64_t bsz, std::int64_t s, std::int64_t d,
                                 std::int64_t n_heads, Tensor<S>& out) {
        const std::int64_t hd = d / n_heads;
        for (std::int64_t b = 0; b < bsz; ++b) {
            S* dst = out.batch_ptr(b);
            for (std::int64_t i = 0; i < s; ++i) {
                for (std::int64_t h = 0; h < n_heads; ++h) {
                    const S* src = packed.data() + ((b * n_heads + h) * s + i) * hd;
                    for (std::int64_t j = 0; j < hd; ++j) dst[i * d + h * hd + j] += src[j];
                }
            }
        }
    }

    // Stable -log softmax(row)[y]; writes the full softmax row into probs.
    static double softmax_row_ce(const S* row, std::int64_t c, std::int32_t y, S* probs) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(denom);
        for (std::int64_t j = 0; j < c; ++j) probs[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - mx) / denom);
        return lse - static_cast<double>(row[y]);
    }

    Id push(Tensor<S> v, bool needs_grad, std::function<void()> pull) {
        nodes_.push_back(Node{std::move(v), Tensor<S>{}, needs_grad && grad_enabled_, std::move(pull)});
        return static_cast<Id>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

using GraphF = Graph<float>;
using GraphD = Graph<double>;

}  // namespace mvlm
