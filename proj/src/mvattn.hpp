#pragma once

#include <Eigen/Dense>
#include <vector>

namespace mvtk::attn {

// Token-major feature block: rows are tokens, columns are channels.
using Feature = Eigen::MatrixXd;

struct MultiViewFeatures {
    std::vector<Feature> views;
    int view_count() const { return static_cast<int>(views.size()); }
};

// Single-head projections; no output projection. Query width may differ from
// key/value width (cross-attention), but all three share head dimension d.
struct AttentionParams {
    Eigen::MatrixXd wq, wk, wv;
    int head_dim() const { return static_cast<int>(wq.cols()); }
};

// Two affine layers with tanh between; maps a camera token to one condition
// token of garment-embedding width.
struct MlpParams {
    Eigen::MatrixXd w1;
    Eigen::RowVectorXd b1;
    Eigen::MatrixXd w2;
    Eigen::RowVectorXd b2;
};

// Garment embedding tokens plus one projected camera token appended last.
struct ConditionTokens {
    Feature tokens;
    int garment_token_count = 0;
};

// Joint spatial attention over all views. Queries come from each view's
// tokens; keys/values from every view plus the two garment blocks. Logits of
// keys in view j, queried from view i, are multiplied by C(i, j) before
// softmax; garment-key logits keep weight 1. Output i has view i's shape.
//
// Per-block math touches only that block's contents, and sums across blocks
// combine partials in sorted value order, so permuting views (and conjugating
// C) permutes outputs bit-exactly.
MultiViewFeatures mv_attention(const MultiViewFeatures& features,
                               const Feature& garment_front, const Feature& garment_back,
                               const Eigen::MatrixXd& C, const AttentionParams& params);

// Same kernel with the modulation multiply omitted entirely: plain attention
// over the concatenated key sequence. mv_attention with C = all-ones produces
// bit-identical output (scaling by 1.0 preserves every bit).
MultiViewFeatures standard_attention(const MultiViewFeatures& features,
                                     const Feature& garment_front, const Feature& garment_back,
                                     const AttentionParams& params);

// Pre-softmax logits (already modulated and 1/sqrt(d)-scaled) for each
// (query view, key block) pair; key blocks are views 0..m-1, then front
// garment, then back garment.
std::vector<std::vector<Eigen::MatrixXd>> mv_attention_logits(
    const MultiViewFeatures& features, const Feature& garment_front,
    const Feature& garment_back, const Eigen::MatrixXd& C, const AttentionParams& params);

struct MvAttentionGrads {
    MultiViewFeatures features;
    Feature garment_front, garment_back;
    Eigen::MatrixXd wq, wk, wv;
};

// Reverse-mode gradients of mv_attention; C is treated as a constant.
MvAttentionGrads mv_attention_grad(const MultiViewFeatures& features,
                                   const Feature& garment_front, const Feature& garment_back,
                                   const Eigen::MatrixXd& C, const AttentionParams& params,
                                   const MultiViewFeatures& upstream);

ConditionTokens build_condition_tokens(const Feature& garment_embed,
                                       const Eigen::VectorXd& camera_token,
                                       const MlpParams& mlp);

struct ConditionTokenGrads {
    Feature garment_embed;
    Eigen::VectorXd camera_token;
    MlpParams mlp;
};

ConditionTokenGrads build_condition_tokens_grad(const Feature& garment_embed,
                                                const Eigen::VectorXd& camera_token,
                                                const MlpParams& mlp,
                                                const Feature& upstream_tokens);

Feature cross_attention(const Feature& queries, const ConditionTokens& cond,
                        const AttentionParams& params);

struct CrossAttentionGrads {
    Feature queries;
    Feature cond_tokens;
    Eigen::MatrixXd wq, wk, wv;
};

CrossAttentionGrads cross_attention_grad(const Feature& queries, const ConditionTokens& cond,
                                         const AttentionParams& params, const Feature& upstream);

}  // namespace mvtk::attn
