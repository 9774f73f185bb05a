#include "mvattn.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace mvtk::attn {

namespace {

// Sum in ascending value order: the result depends only on the multiset of
// addends, not on their arrival order. Used wherever per-block partials are
// combined, which is what makes view permutation an exact symmetry.
double sorted_sum(std::vector<double>& vals) {
    std::sort(vals.begin(), vals.end());
    double acc = 0.0;
    for (double v : vals) acc += v;
    return acc;
}

struct Blocks {
    std::vector<Eigen::MatrixXd> q;                 // projected query blocks
    std::vector<Eigen::MatrixXd> k, v;              // projected key/value blocks
    std::vector<std::vector<double>> scale;         // scale[qi][kb]; empty = unmodulated
    double inv_sqrt_d = 0.0;
};

struct ForwardState {
    std::vector<std::vector<Eigen::MatrixXd>> weights;  // post-softmax, [qi][kb]
    std::vector<Eigen::MatrixXd> out;
};

ForwardState kernel_forward(const Blocks& b,
                            std::vector<std::vector<Eigen::MatrixXd>>* logits_out) {
    size_t nq = b.q.size(), nk = b.k.size();
    ForwardState st;
    st.weights.resize(nq);
    st.out.resize(nq);
    if (logits_out) logits_out->resize(nq);
    std::vector<double> parts(nk);
    for (size_t qi = 0; qi < nq; ++qi) {
        long rows = b.q[qi].rows();
        long d = b.q[qi].cols();
        std::vector<Eigen::MatrixXd> logit(nk);
        for (size_t kb = 0; kb < nk; ++kb) {
            logit[kb] = b.q[qi] * b.k[kb].transpose();
            if (!b.scale.empty()) logit[kb] *= b.scale[qi][kb];
            logit[kb] *= b.inv_sqrt_d;
        }
        if (logits_out) (*logits_out)[qi] = logit;
        Eigen::VectorXd rowmax = Eigen::VectorXd::Constant(
            rows, -std::numeric_limits<double>::infinity());
        for (size_t kb = 0; kb < nk; ++kb)
            if (logit[kb].cols() > 0)
                rowmax = rowmax.cwiseMax(logit[kb].rowwise().maxCoeff());
        st.weights[qi].resize(nk);
        Eigen::MatrixXd partials(rows, nk);
        for (size_t kb = 0; kb < nk; ++kb) {
            st.weights[qi][kb] =
                (logit[kb].colwise() - rowmax).array().exp().matrix();
            if (logit[kb].cols() > 0) {
                // Materialize before placing into the column: evaluating the
                // row reduction straight into a matrix column lets the
                // destination offset steer the SIMD path, and the sum of a
                // block must not depend on which slot the block occupies.
                Eigen::VectorXd block_sum = st.weights[qi][kb].rowwise().sum();
                partials.col(kb) = block_sum;
            } else {
                partials.col(kb).setZero();
            }
        }
        Eigen::VectorXd denom(rows);
        for (long r = 0; r < rows; ++r) {
            for (size_t kb = 0; kb < nk; ++kb) parts[kb] = partials(r, kb);
            denom[r] = sorted_sum(parts);
        }
        std::vector<Eigen::MatrixXd> contrib(nk);
        for (size_t kb = 0; kb < nk; ++kb) {
            st.weights[qi][kb].array().colwise() /= denom.array();
            contrib[kb] = st.weights[qi][kb].rows() && st.weights[qi][kb].cols()
                              ? Eigen::MatrixXd(st.weights[qi][kb] * b.v[kb])
                              : Eigen::MatrixXd::Zero(rows, d);
        }
        st.out[qi].resize(rows, d);
        for (long r = 0; r < rows; ++r)
            for (long c = 0; c < d; ++c) {
                for (size_t kb = 0; kb < nk; ++kb) parts[kb] = contrib[kb](r, c);
                st.out[qi](r, c) = sorted_sum(parts);
            }
    }
    return st;
}

struct BackwardState {
    std::vector<Eigen::MatrixXd> dq, dk, dv;
};

BackwardState kernel_backward(const Blocks& b, const ForwardState& st,
                              const std::vector<Eigen::MatrixXd>& d_out) {
    size_t nq = b.q.size(), nk = b.k.size();
    BackwardState bs;
    bs.dq.resize(nq);
    bs.dk.resize(nk);
    bs.dv.resize(nk);
    for (size_t kb = 0; kb < nk; ++kb) {
        bs.dk[kb] = Eigen::MatrixXd::Zero(b.k[kb].rows(), b.k[kb].cols());
        bs.dv[kb] = Eigen::MatrixXd::Zero(b.v[kb].rows(), b.v[kb].cols());
    }
    for (size_t qi = 0; qi < nq; ++qi) {
        long rows = b.q[qi].rows();
        bs.dq[qi] = Eigen::MatrixXd::Zero(rows, b.q[qi].cols());
        std::vector<Eigen::MatrixXd> d_weights(nk);
        Eigen::VectorXd rowdot = Eigen::VectorXd::Zero(rows);
        for (size_t kb = 0; kb < nk; ++kb) {
            if (b.k[kb].rows() == 0) continue;
            bs.dv[kb] += st.weights[qi][kb].transpose() * d_out[qi];
            d_weights[kb] = d_out[qi] * b.v[kb].transpose();
            rowdot += (st.weights[qi][kb].array() * d_weights[kb].array())
                          .rowwise().sum().matrix();
        }
        for (size_t kb = 0; kb < nk; ++kb) {
            if (b.k[kb].rows() == 0) continue;
            Eigen::MatrixXd d_logit =
                st.weights[qi][kb].array() *
                (d_weights[kb].colwise() - rowdot).array();
            double s = b.inv_sqrt_d * (b.scale.empty() ? 1.0 : b.scale[qi][kb]);
            d_logit *= s;
            bs.dq[qi] += d_logit * b.k[kb];
            bs.dk[kb] += d_logit.transpose() * b.q[qi];
        }
    }
    return bs;
}

void check_params(const AttentionParams& p, long q_channels, long kv_channels) {
    require(p.wq.rows() == q_channels, "attention: W_Q rows mismatch query channels");
    require(p.wk.rows() == kv_channels, "attention: W_K rows mismatch key channels");
    require(p.wv.rows() == kv_channels, "attention: W_V rows mismatch value channels");
    require(p.wq.cols() == p.wk.cols() && p.wq.cols() == p.wv.cols(),
            "attention: head dimensions disagree across W_Q/W_K/W_V");
    require(p.wq.cols() >= 1, "attention: head dimension must be positive");
}

void check_correlation(const Eigen::MatrixXd& C, int m) {
    require(C.rows() == m && C.cols() == m, "correlation: wrong shape for view count");
    for (int i = 0; i < m; ++i) {
        require(std::abs(C(i, i) - 1.0) <= 1e-12, "correlation: diagonal entry != 1");
        for (int j = 0; j < m; ++j) {
            require(C(i, j) >= 0.0 && C(i, j) <= 1.0, "correlation: entry outside [0,1]");
            require(std::abs(C(i, j) - C(j, i)) <= 1e-12, "correlation: not symmetric");
        }
    }
}

// Shared setup for mv_attention variants. Key blocks are the m views followed
// by the two garment blocks; `modulated` controls whether scale factors exist.
Blocks make_mv_blocks(const MultiViewFeatures& f, const Feature& gf, const Feature& gb,
                      const Eigen::MatrixXd* C, const AttentionParams& p) {
    int m = f.view_count();
    require(m >= 1, "mv_attention: no views");
    long ch = f.views[0].cols();
    long tok = f.views[0].rows();
    require(tok >= 1 && ch >= 1, "mv_attention: empty view features");
    for (const auto& v : f.views)
        require(v.cols() == ch && v.rows() == tok, "mv_attention: inhomogeneous views");
    require(gf.cols() == ch || gf.rows() == 0, "mv_attention: garment_front channels mismatch");
    require(gb.cols() == ch || gb.rows() == 0, "mv_attention: garment_back channels mismatch");
    require(p.wq.cols() == ch, "mv_attention: head dim must equal channel count");
    check_params(p, ch, ch);
    if (C) check_correlation(*C, m);

    Blocks b;
    b.inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.head_dim()));
    for (int i = 0; i < m; ++i) b.q.push_back(f.views[i] * p.wq);
    auto add_key = [&](const Feature& x) {
        b.k.push_back(x * p.wk);
        b.v.push_back(x * p.wv);
    };
    for (int i = 0; i < m; ++i) add_key(f.views[i]);
    add_key(gf.rows() ? gf : Feature(0, ch));
    add_key(gb.rows() ? gb : Feature(0, ch));
    if (C) {
        b.scale.assign(m, std::vector<double>(m + 2, 1.0));
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) b.scale[i][j] = (*C)(i, j);
    }
    return b;
}

}  // namespace

MultiViewFeatures mv_attention(const MultiViewFeatures& features, const Feature& garment_front,
                               const Feature& garment_back, const Eigen::MatrixXd& C,
                               const AttentionParams& params) {
    Blocks b = make_mv_blocks(features, garment_front, garment_back, &C, params);
    ForwardState st = kernel_forward(b, nullptr);
    MultiViewFeatures out;
    out.views = std::move(st.out);
    return out;
}

MultiViewFeatures standard_attention(const MultiViewFeatures& features, const Feature& garment_front,
                                     const Feature& garment_back, const AttentionParams& params) {
    Blocks b = make_mv_blocks(features, garment_front, garment_back, nullptr, params);
    ForwardState st = kernel_forward(b, nullptr);
    MultiViewFeatures out;
    out.views = std::move(st.out);
    return out;
}

std::vector<std::vector<Eigen::MatrixXd>> mv_attention_logits(
    const MultiViewFeatures& features, const Feature& garment_front, const Feature& garment_back,
    const Eigen::MatrixXd& C, const AttentionParams& params) {
    Blocks b = make_mv_blocks(features, garment_front, garment_back, &C, params);
    std::vector<std::vector<Eigen::MatrixXd>> logits;
    kernel_forward(b, &logits);
    return logits;
}

MvAttentionGrads mv_attention_grad(const MultiViewFeatures& features, const Feature& garment_front,
                                   const Feature& garment_back, const Eigen::MatrixXd& C,
                                   const AttentionParams& params, const MultiViewFeatures& upstream) {
    int m = features.view_count();
    require(upstream.view_count() == m, "mv_attention_grad: upstream view count mismatch");
    Blocks b = make_mv_blocks(features, garment_front, garment_back, &C, params);
    ForwardState st = kernel_forward(b, nullptr);
    for (int i = 0; i < m; ++i)
        require(upstream.views[i].rows() == st.out[i].rows() &&
                    upstream.views[i].cols() == st.out[i].cols(),
                "mv_attention_grad: upstream shape mismatch");
    BackwardState bs = kernel_backward(b, st, upstream.views);

    MvAttentionGrads g;
    long ch = features.views[0].cols();
    g.wq = Eigen::MatrixXd::Zero(params.wq.rows(), params.wq.cols());
    g.wk = Eigen::MatrixXd::Zero(params.wk.rows(), params.wk.cols());
    g.wv = Eigen::MatrixXd::Zero(params.wv.rows(), params.wv.cols());
    g.features.views.resize(m);
    // Query path: block qi is view i.
    for (int i = 0; i < m; ++i) {
        g.features.views[i] = bs.dq[i] * params.wq.transpose();
        g.wq += features.views[i].transpose() * bs.dq[i];
    }
    // Key/value path: blocks 0..m-1 are views, then front and back garments.
    auto add_kv = [&](const Feature& x, const Eigen::MatrixXd& dk,
                      const Eigen::MatrixXd& dv, Feature* dx) {
        if (x.rows() == 0) return;
        *dx += dk * params.wk.transpose() + dv * params.wv.transpose();
        g.wk += x.transpose() * dk;
        g.wv += x.transpose() * dv;
    };
    for (int i = 0; i < m; ++i)
        add_kv(features.views[i], bs.dk[i], bs.dv[i], &g.features.views[i]);
    g.garment_front = Feature::Zero(garment_front.rows(), garment_front.rows() ? ch : 0);
    g.garment_back = Feature::Zero(garment_back.rows(), garment_back.rows() ? ch : 0);
    add_kv(garment_front, bs.dk[m], bs.dv[m], &g.garment_front);
    add_kv(garment_back, bs.dk[m + 1], bs.dv[m + 1], &g.garment_back);
    return g;
}

ConditionTokens build_condition_tokens(const Feature& garment_embed,
                                       const Eigen::VectorXd& camera_token,
                                       const MlpParams& mlp) {
    require(mlp.w1.rows() == camera_token.size(), "condition tokens: MLP input width mismatch");
    require(mlp.w1.cols() == mlp.b1.size() && mlp.w2.rows() == mlp.b1.size(),
            "condition tokens: MLP hidden width mismatch");
    require(mlp.w2.cols() == mlp.b2.size(), "condition tokens: MLP output bias mismatch");
    require(garment_embed.rows() == 0 || garment_embed.cols() == mlp.w2.cols(),
            "condition tokens: MLP output width must equal garment embedding width");
    Eigen::RowVectorXd h = (camera_token.transpose() * mlp.w1 + mlp.b1).array().tanh();
    Eigen::RowVectorXd y = h * mlp.w2 + mlp.b2;
    ConditionTokens out;
    out.garment_token_count = static_cast<int>(garment_embed.rows());
    out.tokens.resize(garment_embed.rows() + 1, mlp.w2.cols());
    if (garment_embed.rows()) out.tokens.topRows(garment_embed.rows()) = garment_embed;
    out.tokens.bottomRows(1) = y;
    return out;
}

ConditionTokenGrads build_condition_tokens_grad(const Feature& garment_embed,
                                                const Eigen::VectorXd& camera_token,
                                                const MlpParams& mlp,
                                                const Feature& upstream_tokens) {
    require(upstream_tokens.rows() == garment_embed.rows() + 1,
            "condition tokens grad: upstream token count mismatch");
    Eigen::RowVectorXd a = camera_token.transpose() * mlp.w1 + mlp.b1;
    Eigen::RowVectorXd h = a.array().tanh();
    Eigen::RowVectorXd dy = upstream_tokens.bottomRows(1);
    ConditionTokenGrads g;
    g.garment_embed = upstream_tokens.topRows(garment_embed.rows());
    g.mlp.w2 = h.transpose() * dy;
    g.mlp.b2 = dy;
    Eigen::RowVectorXd dh = dy * mlp.w2.transpose();
    Eigen::RowVectorXd da = dh.array() * (1.0 - h.array().square());
    g.mlp.w1 = camera_token * da;
    g.mlp.b1 = da;
    g.camera_token = mlp.w1 * da.transpose();
    return g;
}

Feature cross_attention(const Feature& queries, const ConditionTokens& cond,
                        const AttentionParams& params) {
    require(cond.tokens.rows() >= 1, "cross_attention: no condition tokens");
    require(params.wq.cols() == queries.cols(),
            "cross_attention: head dim must equal query channel count");
    check_params(params, queries.cols(), cond.tokens.cols());
    Blocks b;
    b.inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
    b.q.push_back(queries * params.wq);
    b.k.push_back(cond.tokens * params.wk);
    b.v.push_back(cond.tokens * params.wv);
    ForwardState st = kernel_forward(b, nullptr);
    return st.out[0];
}

CrossAttentionGrads cross_attention_grad(const Feature& queries, const ConditionTokens& cond,
                                         const AttentionParams& params, const Feature& upstream) {
    require(upstream.rows() == queries.rows() && upstream.cols() == params.head_dim(),
            "cross_attention_grad: upstream shape mismatch");
    check_params(params, queries.cols(), cond.tokens.cols());
    Blocks b;
    b.inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(params.head_dim()));
    b.q.push_back(queries * params.wq);
    b.k.push_back(cond.tokens * params.wk);
    b.v.push_back(cond.tokens * params.wv);
    ForwardState st = kernel_forward(b, nullptr);
    BackwardState bs = kernel_backward(b, st, {upstream});
    CrossAttentionGrads g;
    g.queries = bs.dq[0] * params.wq.transpose();
    g.cond_tokens = bs.dk[0] * params.wk.transpose() + bs.dv[0] * params.wv.transpose();
    g.wq = queries.transpose() * bs.dq[0];
    g.wk = cond.tokens.transpose() * bs.dk[0];
    g.wv = cond.tokens.transpose() * bs.dv[0];
    return g;
}

}  // namespace mvtk::attn
