#pragma once

// Template implementation of the encoder forward/backward. Included by
// nncore.cpp, which instantiates float and double variants.

#include <algorithm>
#include <cmath>

#include "restl/nncore.hpp"

namespace restl {

namespace detail {

template <class S>
void bernoulli_mask(std::vector<uint8_t>& mask, size_t offset, size_t count, uint64_t seed, double rate) {
    Rng rng(seed);
    for (size_t i = 0; i < count; ++i) mask[offset + i] = rng.uniform() >= rate ? 1 : 0;
}

template <class S>
inline S elu_back(S out) {
    return out > S(0) ? S(1) : out + S(1);
}

}  // namespace detail

template <class S>
void Params<S>::resize_for(const ModelMeta& m) {
    stem_conv_w.assign(static_cast<size_t>(m.f1) * m.kt, S(0));
    bn1_g.assign(m.f1, S(1));
    bn1_b.assign(m.f1, S(0));
    spatial_w.assign(static_cast<size_t>(m.f1) * m.depth * m.C, S(0));
    bn2_g.assign(m.maps(), S(1));
    bn2_b.assign(m.maps(), S(0));
    task_dw_w.assign(static_cast<size_t>(m.maps()) * m.ks, S(0));
    task_pw_w.assign(static_cast<size_t>(m.f2) * m.maps(), S(0));
    bn3_g.assign(m.f2, S(1));
    bn3_b.assign(m.f2, S(0));
    subj_dw_w.assign(static_cast<size_t>(m.maps()) * m.ks, S(0));
    subj_pw_w.assign(static_cast<size_t>(m.f2) * m.maps(), S(0));
    bn4_g.assign(m.f2, S(1));
    bn4_b.assign(m.f2, S(0));
    subj_lin_w.assign(static_cast<size_t>(m.f2) * m.f2, S(0));
    subj_lin_b.assign(m.f2, S(0));
    cls_w.assign(static_cast<size_t>(m.K) * m.f2, S(0));
    cls_b.assign(m.K, S(0));
}

template <class S>
size_t Params<S>::count() const {
    size_t n = 0;
    visit([&](const char*, const std::vector<S>& v) { n += v.size(); });
    return n;
}

template <class S>
void BnRunning<S>::resize_for(const ModelMeta& m) {
    bn1_mean.assign(m.f1, S(0));
    bn1_var.assign(m.f1, S(1));
    bn2_mean.assign(m.maps(), S(0));
    bn2_var.assign(m.maps(), S(1));
    bn3_mean.assign(m.f2, S(0));
    bn3_var.assign(m.f2, S(1));
    bn4_mean.assign(m.f2, S(0));
    bn4_var.assign(m.f2, S(1));
}

template <class S>
void Grads<S>::zero() {
    p.visit([](const char*, std::vector<S>& v) { std::fill(v.begin(), v.end(), S(0)); });
}

// ---------------------------------------------------------------------------
// Norm-layer helpers. `x` is the layer input laid out as [N][J][inner]; the
// statistics set for map j has N*inner elements.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
struct BnBuffers {
    std::vector<S>* mean;
    std::vector<S>* invstd;
};

// Computes xhat and the statistics used (batch stats in train mode, running
// stats otherwise). Optionally folds the batch estimate into running stats.
template <class S>
void bn_forward(const S* x, S* xhat, int N, int J, int inner, bool train, S eps, S momentum,
                std::vector<S>& run_mean, std::vector<S>& run_var, std::vector<S>& used_mean,
                std::vector<S>& used_invstd, bool update_running) {
    used_mean.assign(J, S(0));
    used_invstd.assign(J, S(0));
    const size_t stride_n = static_cast<size_t>(J) * inner;
    if (train) {
        const double M = static_cast<double>(N) * inner;
        for (int j = 0; j < J; ++j) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* row = x + n * stride_n + static_cast<size_t>(j) * inner;
                for (int i = 0; i < inner; ++i) {
                    double v = static_cast<double>(row[i]);
                    sum += v;
                    sq += v * v;
                }
            }
            double mean = sum / M;
            double var = sq / M - mean * mean;
            if (var < 0.0) var = 0.0;
            used_mean[j] = static_cast<S>(mean);
            used_invstd[j] = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            if (update_running) {
                double unbiased = M > 1.0 ? var * M / (M - 1.0) : var;
                run_mean[j] = static_cast<S>((1.0 - static_cast<double>(momentum)) * run_mean[j] +
                                             static_cast<double>(momentum) * mean);
                run_var[j] = static_cast<S>((1.0 - static_cast<double>(momentum)) * run_var[j] +
                                            static_cast<double>(momentum) * unbiased);
            }
        }
    } else {
        for (int j = 0; j < J; ++j) {
            used_mean[j] = run_mean[j];
            used_invstd[j] = S(1) / std::sqrt(run_var[j] + eps);
        }
    }
    for (int n = 0; n < N; ++n) {
        for (int j = 0; j < J; ++j) {
            const S* src = x + n * stride_n + static_cast<size_t>(j) * inner;
            S* dst = xhat + n * stride_n + static_cast<size_t>(j) * inner;
            const S mu = used_mean[j], is = used_invstd[j];
            for (int i = 0; i < inner; ++i) dst[i] = (src[i] - mu) * is;
        }
    }
}

// In-place: dz (grad wrt the scaled output) becomes dx (grad wrt the input).
// Batch-statistics coupling applies only in train mode.
template <class S>
void bn_backward(S* dz, const S* xhat, int N, int J, int inner, bool train, const std::vector<S>& used_invstd,
                 const S* gamma, S* dgamma, S* dbeta) {
    const size_t stride_n = static_cast<size_t>(J) * inner;
    const double M = static_cast<double>(N) * inner;
    for (int j = 0; j < J; ++j) {
        double s_dz = 0.0, s_dzx = 0.0;
        for (int n = 0; n < N; ++n) {
            const S* dzr = dz + n * stride_n + static_cast<size_t>(j) * inner;
            const S* xr = xhat + n * stride_n + static_cast<size_t>(j) * inner;
            for (int i = 0; i < inner; ++i) {
                s_dz += static_cast<double>(dzr[i]);
                s_dzx += static_cast<double>(dzr[i]) * xr[i];
            }
        }
        if (dgamma) dgamma[j] += static_cast<S>(s_dzx);
        if (dbeta) dbeta[j] += static_cast<S>(s_dz);
        const S g_is = gamma[j] * used_invstd[j];
        if (train) {
            const S m1 = static_cast<S>(s_dz / M);
            const S m2 = static_cast<S>(s_dzx / M);
            for (int n = 0; n < N; ++n) {
                S* dzr = dz + n * stride_n + static_cast<size_t>(j) * inner;
                const S* xr = xhat + n * stride_n + static_cast<size_t>(j) * inner;
                for (int i = 0; i < inner; ++i) dzr[i] = g_is * (dzr[i] - m1 - xr[i] * m2);
            }
        } else {
            for (int n = 0; n < N; ++n) {
                S* dzr = dz + n * stride_n + static_cast<size_t>(j) * inner;
                for (int i = 0; i < inner; ++i) dzr[i] = g_is * dzr[i];
            }
        }
    }
}

// Adds the statistics-regularizer gradient at a norm-layer input.
template <class S>
void stat_reg_inject(S* dx, const S* x, int N, int J, int inner, S weight, const std::vector<S>& mean,
                     const std::vector<S>& var, const std::vector<S>& run_mean, const std::vector<S>& run_var) {
    const size_t stride_n = static_cast<size_t>(J) * inner;
    const double M = static_cast<double>(N) * inner;
    for (int j = 0; j < J; ++j) {
        const S dmu = static_cast<S>(2.0 * weight * (mean[j] - run_mean[j]) / M);
        const S dvar = static_cast<S>(4.0 * weight * (var[j] - run_var[j]) / M);
        for (int n = 0; n < N; ++n) {
            S* dr = dx + n * stride_n + static_cast<size_t>(j) * inner;
            const S* xr = x + n * stride_n + static_cast<size_t>(j) * inner;
            for (int i = 0; i < inner; ++i) dr[i] += dmu + dvar * (xr[i] - mean[j]);
        }
    }
}

// Separable branch shared between task and subject paths.
template <class S>
struct BranchParams {
    const std::vector<S>*dw, *pw, *bn_g, *bn_b;
    std::vector<S>*run_mean, *run_var;
};

}  // namespace detail

template <class S>
void Net<S>::forward(const S* X, int N, Workspace<S>& ws, bool update_running, int64_t dropout_seed, int workers) {
    const ModelMeta& m = meta;
    const int C = m.C, T = m.T, f1 = m.f1, kt = m.kt, maps = m.maps(), t1 = m.t1(), t2 = m.t2(), f2 = m.f2,
              ks = m.ks;
    const int padL = (kt - 1) / 2;
    const int Tp = T + kt - 1;
    const int padLs = (ks - 1) / 2;
    const bool drop_on = train_mode && dropout_seed >= 0 && m.dropout > 0.0f;
    const S keep = S(1) - static_cast<S>(m.dropout);

    ws.N = N;
    auto sz = [](std::vector<S>& v, size_t n) { v.assign(n, S(0)); };
    sz(ws.xpad, static_cast<size_t>(N) * C * Tp);
    sz(ws.y1, static_cast<size_t>(N) * f1 * C * T);
    sz(ws.xhat1, static_cast<size_t>(N) * f1 * C * T);
    sz(ws.y2, static_cast<size_t>(N) * maps * T);
    sz(ws.xhat2, static_cast<size_t>(N) * maps * T);
    sz(ws.e2, static_cast<size_t>(N) * maps * T);
    sz(ws.p2, static_cast<size_t>(N) * maps * t1);
    sz(ws.d2, static_cast<size_t>(N) * maps * t1);
    ws.mask_stem.assign(static_cast<size_t>(N) * maps * t1, 1);
    for (auto* v : {&ws.t_dw, &ws.t_pw, &ws.t_xhat, &ws.t_e, &ws.s_dw, &ws.s_pw, &ws.s_xhat, &ws.s_e})
        sz(*v, static_cast<size_t>(N) * ((v == &ws.t_dw || v == &ws.s_dw) ? maps : f2) * t1);
    sz(ws.t_p, static_cast<size_t>(N) * f2 * t2);
    sz(ws.t_d, static_cast<size_t>(N) * f2 * t2);
    sz(ws.s_p, static_cast<size_t>(N) * f2 * t2);
    sz(ws.s_d, static_cast<size_t>(N) * f2 * t2);
    ws.mask_task.assign(static_cast<size_t>(N) * f2 * t2, 1);
    ws.mask_subj.assign(static_cast<size_t>(N) * f2 * t2, 1);
    sz(ws.h, static_cast<size_t>(N) * f2);
    sz(ws.f, static_cast<size_t>(N) * f2);
    sz(ws.g, static_cast<size_t>(N) * f2);
    sz(ws.logits, static_cast<size_t>(N) * m.K);

    // --- stem: temporal conv ---
    parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
        for (int c = 0; c < C; ++c) {
            S* xp = ws.xpad.data() + (n * C + c) * Tp;
            const S* xin = X + (n * C + c) * T;
            for (int t = 0; t < T; ++t) xp[padL + t] = xin[t];
        }
        for (int f = 0; f < f1; ++f) {
            const S* w = params.stem_conv_w.data() + static_cast<size_t>(f) * kt;
            for (int c = 0; c < C; ++c) {
                const S* xp = ws.xpad.data() + (n * C + c) * Tp;
                S* out = ws.y1.data() + ((n * f1 + f) * C + c) * static_cast<size_t>(T);
                for (int t = 0; t < T; ++t) {
                    S acc = S(0);
                    const S* xr = xp + t;
                    for (int u = 0; u < kt; ++u) acc += w[u] * xr[u];
                    out[t] = acc;
                }
            }
        }
    });

    detail::bn_forward(ws.y1.data(), ws.xhat1.data(), N, f1, C * T, train_mode, bn_eps, bn_momentum,
                       running.bn1_mean, running.bn1_var, ws.bn_mean[0], ws.bn_invstd[0], update_running);

    // --- stem: depthwise spatial conv (fused with bn1 scale/shift) ---
    parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
        std::vector<S> z1row(T);
        for (int f = 0; f < f1; ++f) {
            const S gam = params.bn1_g[f], bet = params.bn1_b[f];
            for (int c = 0; c < C; ++c) {
                const S* xh = ws.xhat1.data() + ((n * f1 + f) * C + c) * static_cast<size_t>(T);
                for (int t = 0; t < T; ++t) z1row[t] = gam * xh[t] + bet;
                for (int d = 0; d < m.depth; ++d) {
                    const int mm = f * m.depth + d;
                    const S wv = params.spatial_w[(static_cast<size_t>(f) * m.depth + d) * C + c];
                    S* out = ws.y2.data() + (n * maps + mm) * static_cast<size_t>(T);
                    for (int t = 0; t < T; ++t) out[t] += wv * z1row[t];
                }
            }
        }
    });

    detail::bn_forward(ws.y2.data(), ws.xhat2.data(), N, maps, T, train_mode, bn_eps, bn_momentum,
                       running.bn2_mean, running.bn2_var, ws.bn_mean[1], ws.bn_invstd[1], update_running);

    // bn2 scale/shift -> ELU -> avgpool -> dropout
    parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
        for (int mm = 0; mm < maps; ++mm) {
            const S gam = params.bn2_g[mm], bet = params.bn2_b[mm];
            const S* xh = ws.xhat2.data() + (n * maps + mm) * static_cast<size_t>(T);
            S* e = ws.e2.data() + (n * maps + mm) * static_cast<size_t>(T);
            for (int t = 0; t < T; ++t) {
                S z = gam * xh[t] + bet;
                e[t] = z > S(0) ? z : std::expm1(z);
            }
            S* p = ws.p2.data() + (n * maps + mm) * static_cast<size_t>(t1);
            for (int tt = 0; tt < t1; ++tt) {
                S acc = S(0);
                for (int i = 0; i < m.pool1; ++i) acc += e[tt * m.pool1 + i];
                p[tt] = acc / static_cast<S>(m.pool1);
            }
        }
        if (drop_on) {
            detail::bernoulli_mask<S>(ws.mask_stem, n * maps * t1, static_cast<size_t>(maps) * t1,
                                      derive_seed(static_cast<uint64_t>(dropout_seed), 0xd0, n), m.dropout);
        }
        const S* p = ws.p2.data() + n * maps * static_cast<size_t>(t1);
        S* d = ws.d2.data() + n * maps * static_cast<size_t>(t1);
        const uint8_t* mk = ws.mask_stem.data() + n * maps * static_cast<size_t>(t1);
        for (int i = 0; i < maps * t1; ++i) d[i] = drop_on ? (mk[i] ? p[i] / keep : S(0)) : p[i];
    });

    // --- branches ---
    auto branch = [&](const std::vector<S>& dw_w, const std::vector<S>& pw_w, std::vector<S>& dwbuf,
                      std::vector<S>& pwbuf) {
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            for (int mm = 0; mm < maps; ++mm) {
                const S* w = dw_w.data() + static_cast<size_t>(mm) * ks;
                const S* in = ws.d2.data() + (n * maps + mm) * static_cast<size_t>(t1);
                S* out = dwbuf.data() + (n * maps + mm) * static_cast<size_t>(t1);
                for (int t = 0; t < t1; ++t) {
                    S acc = S(0);
                    for (int u = 0; u < ks; ++u) {
                        int s = t + u - padLs;
                        if (s >= 0 && s < t1) acc += w[u] * in[s];
                    }
                    out[t] = acc;
                }
            }
            for (int o = 0; o < f2; ++o) {
                const S* w = pw_w.data() + static_cast<size_t>(o) * maps;
                S* out = pwbuf.data() + (n * f2 + o) * static_cast<size_t>(t1);
                std::fill(out, out + t1, S(0));
                for (int mm = 0; mm < maps; ++mm) {
                    const S wv = w[mm];
                    const S* in = dwbuf.data() + (n * maps + mm) * static_cast<size_t>(t1);
                    for (int t = 0; t < t1; ++t) out[t] += wv * in[t];
                }
            }
        });
    };

    branch(params.task_dw_w, params.task_pw_w, ws.t_dw, ws.t_pw);
    detail::bn_forward(ws.t_pw.data(), ws.t_xhat.data(), N, f2, t1, train_mode, bn_eps, bn_momentum,
                       running.bn3_mean, running.bn3_var, ws.bn_mean[2], ws.bn_invstd[2], update_running);
    branch(params.subj_dw_w, params.subj_pw_w, ws.s_dw, ws.s_pw);
    detail::bn_forward(ws.s_pw.data(), ws.s_xhat.data(), N, f2, t1, train_mode, bn_eps, bn_momentum,
                       running.bn4_mean, running.bn4_var, ws.bn_mean[3], ws.bn_invstd[3], update_running);

    auto head = [&](const std::vector<S>& xhat, const S* gam, const S* bet, std::vector<S>& ebuf,
                    std::vector<S>& pbuf, std::vector<S>& dbuf, std::vector<uint8_t>& mask, uint64_t tag,
                    std::vector<S>& feat) {
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            for (int o = 0; o < f2; ++o) {
                const S* xh = xhat.data() + (n * f2 + o) * static_cast<size_t>(t1);
                S* e = ebuf.data() + (n * f2 + o) * static_cast<size_t>(t1);
                for (int t = 0; t < t1; ++t) {
                    S z = gam[o] * xh[t] + bet[o];
                    e[t] = z > S(0) ? z : std::expm1(z);
                }
                S* p = pbuf.data() + (n * f2 + o) * static_cast<size_t>(t2);
                for (int tt = 0; tt < t2; ++tt) {
                    S acc = S(0);
                    for (int i = 0; i < m.pool2; ++i) acc += e[tt * m.pool2 + i];
                    p[tt] = acc / static_cast<S>(m.pool2);
                }
            }
            if (drop_on) {
                detail::bernoulli_mask<S>(mask, n * f2 * t2, static_cast<size_t>(f2) * t2,
                                          derive_seed(static_cast<uint64_t>(dropout_seed), tag, n), m.dropout);
            }
            const S* p = pbuf.data() + n * f2 * static_cast<size_t>(t2);
            S* d = dbuf.data() + n * f2 * static_cast<size_t>(t2);
            const uint8_t* mk = mask.data() + n * f2 * static_cast<size_t>(t2);
            for (int i = 0; i < f2 * t2; ++i) d[i] = drop_on ? (mk[i] ? p[i] / keep : S(0)) : p[i];
            for (int o = 0; o < f2; ++o) {
                S acc = S(0);
                const S* dr = dbuf.data() + (n * f2 + o) * static_cast<size_t>(t2);
                for (int t = 0; t < t2; ++t) acc += dr[t];
                feat[n * f2 + o] = acc / static_cast<S>(t2);
            }
        });
    };

    head(ws.t_xhat, params.bn3_g.data(), params.bn3_b.data(), ws.t_e, ws.t_p, ws.t_d, ws.mask_task, 0xd1, ws.f);
    head(ws.s_xhat, params.bn4_g.data(), params.bn4_b.data(), ws.s_e, ws.s_p, ws.s_d, ws.mask_subj, 0xd2, ws.h);

    // heads: classifier on f, linear projection on h
    for (int n = 0; n < N; ++n) {
        const S* fr = ws.f.data() + static_cast<size_t>(n) * f2;
        const S* hr = ws.h.data() + static_cast<size_t>(n) * f2;
        S* lg = ws.logits.data() + static_cast<size_t>(n) * m.K;
        S* gr = ws.g.data() + static_cast<size_t>(n) * f2;
        for (int k = 0; k < m.K; ++k) {
            S acc = params.cls_b[k];
            const S* w = params.cls_w.data() + static_cast<size_t>(k) * f2;
            for (int o = 0; o < f2; ++o) acc += w[o] * fr[o];
            lg[k] = acc;
        }
        for (int k = 0; k < f2; ++k) {
            S acc = params.subj_lin_b[k];
            const S* w = params.subj_lin_w.data() + static_cast<size_t>(k) * f2;
            for (int o = 0; o < f2; ++o) acc += w[o] * hr[o];
            gr[k] = acc;
        }
    }
}

template <class S>
S Net<S>::stat_reg_loss(const Workspace<S>& ws, int N, StatRegCtx<S>& ctx) const {
    const ModelMeta& m = meta;
    struct LayerRef {
        const std::vector<S>* x;
        int J, inner;
        const std::vector<S>*rmean, *rvar;
    };
    const LayerRef layers[4] = {
        {&ws.y1, m.f1, m.C * m.T, &running.bn1_mean, &running.bn1_var},
        {&ws.y2, m.maps(), m.T, &running.bn2_mean, &running.bn2_var},
        {&ws.t_pw, m.f2, m.t1(), &running.bn3_mean, &running.bn3_var},
        {&ws.s_pw, m.f2, m.t1(), &running.bn4_mean, &running.bn4_var},
    };
    S total = S(0);
    for (int l = 0; l < 4; ++l) {
        const auto& L = layers[l];
        ctx.mean[l].assign(L.J, S(0));
        ctx.var[l].assign(L.J, S(0));
        const double M = static_cast<double>(N) * L.inner;
        for (int j = 0; j < L.J; ++j) {
            double sum = 0.0, sq = 0.0;
            for (int n = 0; n < N; ++n) {
                const S* row = L.x->data() + (static_cast<size_t>(n) * L.J + j) * L.inner;
                for (int i = 0; i < L.inner; ++i) {
                    sum += static_cast<double>(row[i]);
                    sq += static_cast<double>(row[i]) * row[i];
                }
            }
            double mean = sum / M;
            double var = sq / M - mean * mean;
            if (var < 0.0) var = 0.0;
            ctx.mean[l][j] = static_cast<S>(mean);
            ctx.var[l][j] = static_cast<S>(var);
            double dm = mean - static_cast<double>((*L.rmean)[j]);
            double dv = var - static_cast<double>((*L.rvar)[j]);
            total += static_cast<S>(ctx.weight * (dm * dm + dv * dv));
        }
    }
    return total;
}

template <class S>
void Net<S>::backward(const S* X, int N, Workspace<S>& ws, const BackSignal<S>& sig, Grads<S>* grads, S* dX,
                      const StatRegCtx<S>* statreg, int workers) const {
    (void)X;
    const ModelMeta& m = meta;
    if (sig.dlogits.size() != static_cast<size_t>(N) * m.K || sig.df.size() != static_cast<size_t>(N) * m.f2 ||
        sig.dg.size() != static_cast<size_t>(N) * m.f2)
        numeric_error("backward: gradient signal shape mismatch");
    const int C = m.C, T = m.T, f1 = m.f1, kt = m.kt, maps = m.maps(), t1 = m.t1(), t2 = m.t2(), f2 = m.f2,
              ks = m.ks;
    const int padL = (kt - 1) / 2;
    const int Tp = T + kt - 1;
    const int padLs = (ks - 1) / 2;
    const bool drop_on = train_mode && m.dropout > 0.0f;
    const S keep = S(1) - static_cast<S>(m.dropout);

    // head gradients
    std::vector<S> df = sig.df;       // [n][f2], accumulates classifier path
    std::vector<S> dh(static_cast<size_t>(N) * f2, S(0));
    df.resize(static_cast<size_t>(N) * f2, S(0));
    for (int n = 0; n < N; ++n) {
        const S* dlg = sig.dlogits.data() + static_cast<size_t>(n) * m.K;
        const S* dgr = sig.dg.data() + static_cast<size_t>(n) * f2;
        const S* fr = ws.f.data() + static_cast<size_t>(n) * f2;
        const S* hr = ws.h.data() + static_cast<size_t>(n) * f2;
        for (int k = 0; k < m.K; ++k) {
            const S* w = params.cls_w.data() + static_cast<size_t>(k) * f2;
            for (int o = 0; o < f2; ++o) df[n * static_cast<size_t>(f2) + o] += w[o] * dlg[k];
            if (grads) {
                S* gw = grads->p.cls_w.data() + static_cast<size_t>(k) * f2;
                for (int o = 0; o < f2; ++o) gw[o] += dlg[k] * fr[o];
                grads->p.cls_b[k] += dlg[k];
            }
        }
        for (int k = 0; k < f2; ++k) {
            const S* w = params.subj_lin_w.data() + static_cast<size_t>(k) * f2;
            for (int o = 0; o < f2; ++o) dh[n * static_cast<size_t>(f2) + o] += w[o] * dgr[k];
            if (grads) {
                S* gw = grads->p.subj_lin_w.data() + static_cast<size_t>(k) * f2;
                for (int o = 0; o < f2; ++o) gw[o] += dgr[k] * hr[o];
                grads->p.subj_lin_b[k] += dgr[k];
            }
        }
    }

    std::vector<S> dd2(static_cast<size_t>(N) * maps * t1, S(0));

    // Branch backward: feature grad -> GAP -> dropout -> pool -> ELU -> bn ->
    // pointwise -> depthwise -> stem-output grad.
    auto branch_back = [&](const std::vector<S>& dfeat, const std::vector<S>& ebuf, const std::vector<S>& xhat,
                           const std::vector<S>& dwbuf, const std::vector<uint8_t>& mask, int bn_idx,
                           const std::vector<S>& bn_g, std::vector<S>* dgam, std::vector<S>* dbet,
                           const std::vector<S>& pw_w, const std::vector<S>& dw_w, std::vector<S>* dpw,
                           std::vector<S>* ddw, const std::vector<S>& statx) {
        std::vector<S> de(static_cast<size_t>(N) * f2 * t1, S(0));
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            for (int o = 0; o < f2; ++o) {
                const S dfo = dfeat[n * f2 + o] / static_cast<S>(t2);
                const uint8_t* mk = mask.data() + (n * f2 + o) * static_cast<size_t>(t2);
                const S* e = ebuf.data() + (n * f2 + o) * static_cast<size_t>(t1);
                S* der = de.data() + (n * f2 + o) * static_cast<size_t>(t1);
                for (int tt = 0; tt < t2; ++tt) {
                    S dpool = dfo;
                    if (drop_on) dpool = mk[tt] ? dpool / keep : S(0);
                    const S spread = dpool / static_cast<S>(m.pool2);
                    for (int i = 0; i < m.pool2; ++i) {
                        int t = tt * m.pool2 + i;
                        der[t] = spread * detail::elu_back(e[t]);
                    }
                }
            }
        });

        detail::bn_backward(de.data(), xhat.data(), N, f2, t1, train_mode, ws.bn_invstd[bn_idx], bn_g.data(),
                            grads ? dgam->data() : nullptr, grads ? dbet->data() : nullptr);
        if (statreg && statreg->weight != S(0)) {
            detail::stat_reg_inject(de.data(), statx.data(), N, f2, t1, statreg->weight, statreg->mean[bn_idx],
                                    statreg->var[bn_idx], bn_idx == 2 ? running.bn3_mean : running.bn4_mean,
                                    bn_idx == 2 ? running.bn3_var : running.bn4_var);
        }

        // pointwise backward
        std::vector<S> ddwb(static_cast<size_t>(N) * maps * t1, S(0));
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            for (int o = 0; o < f2; ++o) {
                const S* der = de.data() + (n * f2 + o) * static_cast<size_t>(t1);
                const S* w = pw_w.data() + static_cast<size_t>(o) * maps;
                for (int mm = 0; mm < maps; ++mm) {
                    S* dst = ddwb.data() + (n * maps + mm) * static_cast<size_t>(t1);
                    const S wv = w[mm];
                    for (int t = 0; t < t1; ++t) dst[t] += wv * der[t];
                }
            }
        });
        if (grads) {
            parallel_for(0, static_cast<size_t>(f2), workers, [&](size_t o) {
                S* gw = dpw->data() + o * maps;
                for (int n = 0; n < N; ++n) {
                    const S* der = de.data() + (n * static_cast<size_t>(f2) + o) * t1;
                    for (int mm = 0; mm < maps; ++mm) {
                        const S* in = dwbuf.data() + (n * static_cast<size_t>(maps) + mm) * t1;
                        S acc = S(0);
                        for (int t = 0; t < t1; ++t) acc += der[t] * in[t];
                        gw[mm] += acc;
                    }
                }
            });
        }

        // depthwise backward
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            for (int mm = 0; mm < maps; ++mm) {
                const S* dy = ddwb.data() + (n * maps + mm) * static_cast<size_t>(t1);
                const S* w = dw_w.data() + static_cast<size_t>(mm) * ks;
                S* dst = dd2.data() + (n * maps + mm) * static_cast<size_t>(t1);
                for (int s = 0; s < t1; ++s) {
                    S acc = S(0);
                    for (int u = 0; u < ks; ++u) {
                        int t = s - u + padLs;
                        if (t >= 0 && t < t1) acc += w[u] * dy[t];
                    }
                    dst[s] += acc;
                }
            }
        });
        if (grads) {
            parallel_for(0, static_cast<size_t>(maps), workers, [&](size_t mm) {
                S* gw = ddw->data() + mm * ks;
                for (int n = 0; n < N; ++n) {
                    const S* dy = ddwb.data() + (n * static_cast<size_t>(maps) + mm) * t1;
                    const S* in = ws.d2.data() + (n * static_cast<size_t>(maps) + mm) * t1;
                    for (int u = 0; u < ks; ++u) {
                        S acc = S(0);
                        for (int t = 0; t < t1; ++t) {
                            int s = t + u - padLs;
                            if (s >= 0 && s < t1) acc += dy[t] * in[s];
                        }
                        gw[u] += acc;
                    }
                }
            });
        }
    };

    branch_back(df, ws.t_e, ws.t_xhat, ws.t_dw, ws.mask_task, 2, params.bn3_g,
                grads ? &grads->p.bn3_g : nullptr, grads ? &grads->p.bn3_b : nullptr, params.task_pw_w,
                params.task_dw_w, grads ? &grads->p.task_pw_w : nullptr, grads ? &grads->p.task_dw_w : nullptr,
                ws.t_pw);
    branch_back(dh, ws.s_e, ws.s_xhat, ws.s_dw, ws.mask_subj, 3, params.bn4_g,
                grads ? &grads->p.bn4_g : nullptr, grads ? &grads->p.bn4_b : nullptr, params.subj_pw_w,
                params.subj_dw_w, grads ? &grads->p.subj_pw_w : nullptr, grads ? &grads->p.subj_dw_w : nullptr,
                ws.s_pw);

    // stem dropout + pool1 + ELU backward
    std::vector<S> de2(static_cast<size_t>(N) * maps * static_cast<size_t>(T), S(0));
    parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
        for (int mm = 0; mm < maps; ++mm) {
            const S* dd = dd2.data() + (n * maps + mm) * static_cast<size_t>(t1);
            const uint8_t* mk = ws.mask_stem.data() + (n * maps + mm) * static_cast<size_t>(t1);
            const S* e = ws.e2.data() + (n * maps + mm) * static_cast<size_t>(T);
            S* de = de2.data() + (n * maps + mm) * static_cast<size_t>(T);
            for (int tt = 0; tt < t1; ++tt) {
                S dpool = dd[tt];
                if (drop_on) dpool = mk[tt] ? dpool / keep : S(0);
                const S spread = dpool / static_cast<S>(m.pool1);
                for (int i = 0; i < m.pool1; ++i) {
                    int t = tt * m.pool1 + i;
                    de[t] = spread * detail::elu_back(e[t]);
                }
            }
        }
    });

    detail::bn_backward(de2.data(), ws.xhat2.data(), N, maps, T, train_mode, ws.bn_invstd[1], params.bn2_g.data(),
                        grads ? grads->p.bn2_g.data() : nullptr, grads ? grads->p.bn2_b.data() : nullptr);
    if (statreg && statreg->weight != S(0)) {
        detail::stat_reg_inject(de2.data(), ws.y2.data(), N, maps, T, statreg->weight, statreg->mean[1],
                                statreg->var[1], running.bn2_mean, running.bn2_var);
    }

    // spatial conv backward
    std::vector<S> dz1(static_cast<size_t>(N) * f1 * C * static_cast<size_t>(T), S(0));
    parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
        for (int f = 0; f < f1; ++f) {
            for (int d = 0; d < m.depth; ++d) {
                const int mm = f * m.depth + d;
                const S* dy = de2.data() + (n * maps + mm) * static_cast<size_t>(T);
                for (int c = 0; c < C; ++c) {
                    const S wv = params.spatial_w[(static_cast<size_t>(f) * m.depth + d) * C + c];
                    S* dst = dz1.data() + ((n * f1 + f) * C + c) * static_cast<size_t>(T);
                    for (int t = 0; t < T; ++t) dst[t] += wv * dy[t];
                }
            }
        }
    });
    if (grads) {
        parallel_for(0, static_cast<size_t>(f1) * m.depth, workers, [&](size_t fd) {
            const int f = static_cast<int>(fd) / m.depth;
            const int mm = static_cast<int>(fd);
            const S gam = params.bn1_g[f], bet = params.bn1_b[f];
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                for (int n = 0; n < N; ++n) {
                    const S* dy = de2.data() + (n * static_cast<size_t>(maps) + mm) * T;
                    const S* xh = ws.xhat1.data() + ((n * static_cast<size_t>(f1) + f) * C + c) * T;
                    for (int t = 0; t < T; ++t) acc += dy[t] * (gam * xh[t] + bet);
                }
                grads->p.spatial_w[fd * C + c] += acc;
            }
        });
    }

    detail::bn_backward(dz1.data(), ws.xhat1.data(), N, f1, C * T, train_mode, ws.bn_invstd[0], params.bn1_g.data(),
                        grads ? grads->p.bn1_g.data() : nullptr, grads ? grads->p.bn1_b.data() : nullptr);
    if (statreg && statreg->weight != S(0)) {
        detail::stat_reg_inject(dz1.data(), ws.y1.data(), N, f1, C * T, statreg->weight, statreg->mean[0],
                                statreg->var[0], running.bn1_mean, running.bn1_var);
    }

    // temporal conv backward
    if (grads) {
        parallel_for(0, static_cast<size_t>(f1), workers, [&](size_t f) {
            S* gw = grads->p.stem_conv_w.data() + f * kt;
            for (int n = 0; n < N; ++n) {
                for (int c = 0; c < C; ++c) {
                    const S* dy = dz1.data() + ((n * static_cast<size_t>(f1) + f) * C + c) * T;
                    const S* xp = ws.xpad.data() + (n * static_cast<size_t>(C) + c) * Tp;
                    for (int u = 0; u < kt; ++u) {
                        S acc = S(0);
                        const S* xr = xp + u;
                        for (int t = 0; t < T; ++t) acc += dy[t] * xr[t];
                        gw[u] += acc;
                    }
                }
            }
        });
    }
    if (dX) {
        const int padR = kt - 1 - padL;
        parallel_for(0, static_cast<size_t>(N), workers, [&](size_t n) {
            std::vector<S> dypad(T + kt - 1);
            for (int c = 0; c < C; ++c) {
                S* dst = dX + (n * C + c) * static_cast<size_t>(T);
                std::fill(dst, dst + T, S(0));
                for (int f = 0; f < f1; ++f) {
                    const S* dy = dz1.data() + ((n * f1 + f) * C + c) * static_cast<size_t>(T);
                    std::fill(dypad.begin(), dypad.end(), S(0));
                    for (int t = 0; t < T; ++t) dypad[padR + t] = dy[t];
                    const S* w = params.stem_conv_w.data() + static_cast<size_t>(f) * kt;
                    for (int s = 0; s < T; ++s) {
                        S acc = S(0);
                        const S* dr = dypad.data() + s;
                        for (int u = 0; u < kt; ++u) acc += w[kt - 1 - u] * dr[u];
                        dst[s] += acc;
                    }
                }
            }
        });
    }
}

}  // namespace restl
