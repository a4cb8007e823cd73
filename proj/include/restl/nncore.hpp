#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "restl/common.hpp"
#include "restl/trial.hpp"

namespace restl {

// Compact convolutional encoder split into stem / task branch / subject
// branch / classifier. Kernel sizes follow the standard compact-conv EEG
// design: temporal conv (f1 x kt), depthwise spatial conv over channels,
// then one separable temporal block per branch.
struct ModelMeta {
    int C = 0, T = 0, K = 0;
    int f1 = 8;
    int depth = 2;
    int f2 = 16;
    int kt = 64;
    int ks = 16;
    int pool1 = 4;
    int pool2 = 8;
    float dropout = 0.25f;

    int maps() const { return f1 * depth; }
    int t1() const { return T / pool1; }
    int t2() const { return t1() / pool2; }
    int feat() const { return f2; }

    bool operator==(const ModelMeta&) const = default;
};

template <class S>
struct Params {
    std::vector<S> stem_conv_w;   // [f1][kt]
    std::vector<S> bn1_g, bn1_b;  // [f1]
    std::vector<S> spatial_w;     // [f1][depth][C]
    std::vector<S> bn2_g, bn2_b;  // [maps]
    std::vector<S> task_dw_w;     // [maps][ks]
    std::vector<S> task_pw_w;     // [f2][maps]
    std::vector<S> bn3_g, bn3_b;  // [f2]
    std::vector<S> subj_dw_w;     // [maps][ks]
    std::vector<S> subj_pw_w;     // [f2][maps]
    std::vector<S> bn4_g, bn4_b;  // [f2]
    std::vector<S> subj_lin_w;    // [f2][f2]
    std::vector<S> subj_lin_b;    // [f2]
    std::vector<S> cls_w;         // [K][f2]
    std::vector<S> cls_b;         // [K]

    template <class Fn>
    void visit(Fn&& fn) {
        fn("stem_conv_w", stem_conv_w);
        fn("bn1_g", bn1_g);
        fn("bn1_b", bn1_b);
        fn("spatial_w", spatial_w);
        fn("bn2_g", bn2_g);
        fn("bn2_b", bn2_b);
        fn("task_dw_w", task_dw_w);
        fn("task_pw_w", task_pw_w);
        fn("bn3_g", bn3_g);
        fn("bn3_b", bn3_b);
        fn("subj_dw_w", subj_dw_w);
        fn("subj_pw_w", subj_pw_w);
        fn("bn4_g", bn4_g);
        fn("bn4_b", bn4_b);
        fn("subj_lin_w", subj_lin_w);
        fn("subj_lin_b", subj_lin_b);
        fn("cls_w", cls_w);
        fn("cls_b", cls_b);
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        const_cast<Params*>(this)->visit([&](const char* n, auto& v) { fn(n, const_cast<const std::vector<S>&>(v)); });
    }

    void resize_for(const ModelMeta& m);
    size_t count() const;
};

template <class S>
struct BnRunning {
    std::vector<S> bn1_mean, bn1_var;
    std::vector<S> bn2_mean, bn2_var;
    std::vector<S> bn3_mean, bn3_var;
    std::vector<S> bn4_mean, bn4_var;

    template <class Fn>
    void visit(Fn&& fn) {
        fn("bn1_mean", bn1_mean);
        fn("bn1_var", bn1_var);
        fn("bn2_mean", bn2_mean);
        fn("bn2_var", bn2_var);
        fn("bn3_mean", bn3_mean);
        fn("bn3_var", bn3_var);
        fn("bn4_mean", bn4_mean);
        fn("bn4_var", bn4_var);
    }
    template <class Fn>
    void visit(Fn&& fn) const {
        const_cast<BnRunning*>(this)->visit([&](const char* n, auto& v) { fn(n, const_cast<const std::vector<S>&>(v)); });
    }

    void resize_for(const ModelMeta& m);
};

// Per-batch activation storage; reusable across steps to avoid realloc churn.
template <class S>
struct Workspace {
    int N = 0;
    std::vector<S> xpad;                   // [n][c][T+kt-1]
    std::vector<S> y1, xhat1;              // [n][f1][c][T]
    std::vector<S> y2, xhat2, e2, p2, d2;  // [n][maps][*]
    std::vector<uint8_t> mask_stem, mask_task, mask_subj;
    std::vector<S> t_dw, t_pw, t_xhat, t_e, t_p, t_d;  // task branch
    std::vector<S> s_dw, s_pw, s_xhat, s_e, s_p, s_d;  // subject branch
    std::vector<S> h;                                  // [n][f2] pre-linear subject feature
    std::vector<S> f, g, logits;
    // batch statistics actually used by each norm layer (train: batch, eval: running)
    std::array<std::vector<S>, 4> bn_mean, bn_invstd;
};

template <class S>
struct Grads {
    Params<S> p;
    void zero();
};

// Gradient signal entering the backward pass: d(loss)/d(logits, f, g).
template <class S>
struct BackSignal {
    std::vector<S> dlogits;  // [n][K]
    std::vector<S> df;       // [n][f2]
    std::vector<S> dg;       // [n][f2]
    void resize(int N, const ModelMeta& m) {
        dlogits.assign(static_cast<size_t>(N) * m.K, S(0));
        df.assign(static_cast<size_t>(N) * m.f2, S(0));
        dg.assign(static_cast<size_t>(N) * m.f2, S(0));
    }
};

// Feature-statistics regularizer context (normalization-matching synthesis):
// weight * sum over norm layers of |mu(z)-mu_run|^2 + |var(z)-var_run|^2.
template <class S>
struct StatRegCtx {
    S weight = S(0);
    // Filled by stat_reg_loss, consumed by backward.
    std::array<std::vector<S>, 4> mean, var;
};

template <class S>
struct Net {
    ModelMeta meta;
    Params<S> params;
    BnRunning<S> running;
    bool train_mode = false;
    S bn_momentum = S(0.1);
    S bn_eps = S(1e-5);

    // X is [N][C][T] row-major. dropout_seed < 0 disables dropout entirely
    // (the deterministic path used by eval, gradient checks, and anything
    // batch-order sensitive).
    void forward(const S* X, int N, Workspace<S>& ws, bool update_running, int64_t dropout_seed,
                 int workers = 1);

    // Backward for the scalar whose gradient signal is `sig`. Any of `grads`
    // and `dX` may be null. `statreg`, when set, injects the statistics
    // regularizer's gradient at each norm-layer input.
    void backward(const S* X, int N, Workspace<S>& ws, const BackSignal<S>& sig, Grads<S>* grads, S* dX,
                  const StatRegCtx<S>* statreg = nullptr, int workers = 1) const;

    // Statistics regularizer value for the activations recorded in ws;
    // fills ctx with the per-layer batch moments for the backward pass.
    S stat_reg_loss(const Workspace<S>& ws, int N, StatRegCtx<S>& ctx) const;
};

// ---------------------------------------------------------------------------
// ModelBundle: the float-precision artifact that moves between stages.
// ---------------------------------------------------------------------------

struct ForwardOut {
    std::vector<float> f;  // 16
    std::vector<float> g;  // 16
    std::vector<float> logits;
};

struct PrototypeBank {
    int K = 0;
    int dim = 0;
    float eps = 1e-5f;
    bool initialized = false;
    std::vector<float> P;  // [K][dim]

    const float* row(int k) const { return P.data() + static_cast<size_t>(k) * dim; }
    float* row(int k) { return P.data() + static_cast<size_t>(k) * dim; }
};

struct ModelBundle {
    Net<float> net;
    PrototypeBank bank;

    bool train_mode() const { return net.train_mode; }
    void set_train(bool on) { net.train_mode = on; }
    const ModelMeta& meta() const { return net.meta; }
};

ModelBundle init_model(int channels, int samples, int num_classes, uint64_t seed);

// Eval-mode convenience forward over trials (shape-checked).
std::vector<ForwardOut> forward(ModelBundle& bundle, const std::vector<const Trial*>& batch, int workers = 1);
std::vector<ForwardOut> forward(ModelBundle& bundle, const std::vector<Trial>& batch, int workers = 1);

// Packs a batch of trials into the flat [N][C][T] layout the net consumes.
std::vector<float> pack_batch(const std::vector<const Trial*>& batch, const ModelMeta& meta);

uint64_t model_hash(const ModelBundle& bundle);

void save_checkpoint(const ModelBundle& bundle, const std::filesystem::path& file);
ModelBundle load_checkpoint(const std::filesystem::path& file);

// Double-precision copy for gradient verification.
Net<double> to_double(const Net<float>& n);

extern template struct Net<float>;
extern template struct Net<double>;

}  // namespace restl
