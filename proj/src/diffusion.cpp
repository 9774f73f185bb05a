#include "diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "errors.hpp"
#include "metrics.hpp"
#include "rng.hpp"

namespace mvtk::diff {

namespace {

attn::Feature to_tokens(const Image& im) {
    attn::Feature f(static_cast<long>(im.height) * im.width, im.channels);
    for (int c = 0; c < im.channels; ++c)
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) f(y * im.width + x, c) = im.at(c, y, x);
    return f;
}

Image from_tokens(const attn::Feature& f, int h, int w) {
    Image im(static_cast<int>(f.cols()), h, w, 0.0);
    for (int c = 0; c < im.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) im.at(c, y, x) = f(y * w + x, c);
    return im;
}

attn::Feature affine(const attn::Feature& x, const Eigen::MatrixXd& w,
                     const Eigen::RowVectorXd& b) {
    return (x * w).rowwise() + b;
}

// FiLM row t: out = s * (1 + scale_t) + shift_t, broadcast over tokens.
attn::Feature film(const attn::Feature& s, const DenoiserParams& p, int t) {
    Eigen::RowVectorXd gain =
        Eigen::RowVectorXd::Ones(s.cols()) + p.time_scale.row(t);
    attn::Feature out(s.rows(), s.cols());
    for (long r = 0; r < s.rows(); ++r)
        out.row(r) = s.row(r).cwiseProduct(gain) + p.time_shift.row(t);
    return out;
}

void film_backward(const attn::Feature& s, const attn::Feature& upstream,
                   const DenoiserParams& p, int t, attn::Feature* ds,
                   DenoiserParams* g) {
    Eigen::RowVectorXd gain =
        Eigen::RowVectorXd::Ones(s.cols()) + p.time_scale.row(t);
    ds->resize(s.rows(), s.cols());
    for (long r = 0; r < s.rows(); ++r) {
        ds->row(r) = upstream.row(r).cwiseProduct(gain);
        g->time_scale.row(t) += upstream.row(r).cwiseProduct(s.row(r));
        g->time_shift.row(t) += upstream.row(r);
    }
}

struct TrunkTape {
    attn::Feature input_tokens;  // garment latent tokens padded with zero slots
    attn::Feature stem_out;
    std::vector<attn::Feature> x;  // blocks+1 levels
    std::vector<attn::Feature> u, h, g;
};

struct Tape {
    std::vector<attn::Feature> pose_tokens;   // raw patchified normals per view
    std::vector<attn::Feature> input_tokens;  // [z_t | pose affine | agnostic]
    std::vector<attn::Feature> stem_out;
    std::vector<std::vector<attn::Feature>> x;  // x[b][view], blocks+1 levels
    std::vector<std::vector<attn::Feature>> u, h, g;
    std::vector<attn::Feature> eps_tok;
    TrunkTape front, back;
    std::vector<attn::ConditionTokens> y_view;
    attn::ConditionTokens y_garment;
    Eigen::VectorXd cam_identity;
};

const Eigen::MatrixXd& ones_1x1() {
    static const Eigen::MatrixXd m = Eigen::MatrixXd::Ones(1, 1);
    return m;
}

void trunk_forward(const DenoiserParams& P, const DenoiserConfig& cfg,
                   const LatentImage& garment_latent, const attn::ConditionTokens& yg,
                   TrunkTape* T) {
    int c = cfg.latent_channels();
    attn::Feature tok = to_tokens(garment_latent);
    attn::Feature in = attn::Feature::Zero(tok.rows(), 3 * c);
    in.leftCols(c) = tok;
    T->input_tokens = in;
    T->stem_out = affine(in, P.stem_w, P.stem_b);
    T->x.push_back(film(T->stem_out, P, 0));
    attn::Feature empty = attn::Feature::Zero(0, cfg.model_dim());
    for (const BlockParams& B : P.blocks) {
        const attn::Feature& x = T->x.back();
        attn::Feature u = affine(x, B.lin_in_w, B.lin_in_b);
        T->u.push_back(u);
        attn::MultiViewFeatures mvf;
        mvf.views = {u};
        attn::Feature h =
            u + attn::mv_attention(mvf, empty, empty, ones_1x1(), B.mv).views[0];
        T->h.push_back(h);
        attn::Feature g = h + attn::cross_attention(h, yg, B.cross);
        T->g.push_back(g);
        T->x.push_back(g + affine(g, B.lin_out_w, B.lin_out_b));
    }
}

// Gradient flow mirrors trunk_forward; cache_grads[b] joins at each block's
// lin_in output, where the main pass reads the garment features.
void trunk_backward(const DenoiserParams& P, const DenoiserConfig& cfg,
                    const TrunkTape& T, const attn::ConditionTokens& yg,
                    const std::vector<attn::Feature>& cache_grads, DenoiserParams* g,
                    attn::Feature* dy_garment) {
    int B = static_cast<int>(P.blocks.size());
    attn::Feature empty = attn::Feature::Zero(0, cfg.model_dim());
    attn::Feature dx = attn::Feature::Zero(T.x[B].rows(), T.x[B].cols());
    for (int b = B - 1; b >= 0; --b) {
        const BlockParams& blk = P.blocks[b];
        BlockParams& gb = g->blocks[b];
        attn::Feature dgg = dx + dx * blk.lin_out_w.transpose();
        gb.lin_out_w += T.g[b].transpose() * dx;
        gb.lin_out_b += dx.colwise().sum();
        attn::CrossAttentionGrads cg =
            attn::cross_attention_grad(T.h[b], yg, blk.cross, dgg);
        attn::Feature dh = dgg + cg.queries;
        *dy_garment += cg.cond_tokens;
        gb.cross.wq += cg.wq;
        gb.cross.wk += cg.wk;
        gb.cross.wv += cg.wv;
        attn::MultiViewFeatures mvf, up;
        mvf.views = {T.u[b]};
        up.views = {dh};
        attn::MvAttentionGrads mg =
            attn::mv_attention_grad(mvf, empty, empty, ones_1x1(), blk.mv, up);
        attn::Feature du = dh + mg.features.views[0] + cache_grads[b];
        gb.mv.wq += mg.wq;
        gb.mv.wk += mg.wk;
        gb.mv.wv += mg.wv;
        dx = du * blk.lin_in_w.transpose();
        gb.lin_in_w += T.x[b].transpose() * du;
        gb.lin_in_b += du.colwise().sum();
    }
    attn::Feature ds;
    film_backward(T.stem_out, dx, P, 0, &ds, g);
    g->stem_w += T.input_tokens.transpose() * ds;
    g->stem_b += ds.colwise().sum();
    // garment latent and zero-pad slots are inputs, their grads stop here
}

void check_bundle(const ToyDenoiser& model, const ConditioningBundle& cond,
                  const std::vector<LatentImage>& z_t, const std::vector<int>& ts) {
    const DenoiserConfig& cfg = model.config;
    int m = cond.view_count();
    require(m >= 1, "denoiser: need at least one view");
    require(static_cast<int>(z_t.size()) == m && static_cast<int>(ts.size()) == m,
            "denoiser: latent/timestep counts disagree with conditioning");
    require(static_cast<int>(cond.agnostic.size()) == m &&
                static_cast<int>(cond.camera_tokens.size()) == m,
            "denoiser: per-view conditioning counts disagree");
    require(cond.correlation.rows() == m && cond.correlation.cols() == m,
            "denoiser: correlation matrix is not m x m");
    int c = cfg.latent_channels();
    require(cond.garment_front.channels == c && cond.garment_back.channels == c,
            "denoiser: garment latent channel mismatch");
    require(cond.garment_embed.rows() == 2 && cond.garment_embed.cols() == cfg.cond_dim,
            "denoiser: garment embedding must be 2 x cond_dim");
    for (int i = 0; i < m; ++i) {
        require(ts[i] >= 0 && ts[i] < cfg.timesteps, "denoiser: timestep out of range");
        require(z_t[i].channels == c, "denoiser: latent channel mismatch");
        require(z_t[i].height == z_t[0].height && z_t[i].width == z_t[0].width,
                "denoiser: latent sizes differ across views");
        require(cond.pose[i].channels == c && cond.pose[i].height == z_t[i].height &&
                    cond.pose[i].width == z_t[i].width,
                "denoiser: pose latent shape mismatch");
        require(cond.agnostic[i].channels == c &&
                    cond.agnostic[i].height == z_t[i].height &&
                    cond.agnostic[i].width == z_t[i].width,
                "denoiser: agnostic latent shape mismatch");
        require(cond.camera_tokens[i].size() == cfg.camera_dim(),
                "denoiser: camera token width mismatch");
    }
}

std::vector<LatentImage> forward(const ToyDenoiser& model, const ConditioningBundle& cond,
                                 const std::vector<LatentImage>& z_t,
                                 const std::vector<int>& ts, Tape* tp) {
    check_bundle(model, cond, z_t, ts);
    const DenoiserConfig& cfg = model.config;
    const DenoiserParams& P = model.params;
    int m = cond.view_count();
    int h = z_t[0].height, w = z_t[0].width;

    tp->cam_identity =
        camera::encode_camera_rotation(Eigen::Matrix3d::Identity(), cfg.freq_count);
    tp->y_garment =
        attn::build_condition_tokens(cond.garment_embed, tp->cam_identity, P.cond_mlp);
    trunk_forward(P, cfg, cond.garment_front, tp->y_garment, &tp->front);
    trunk_forward(P, cfg, cond.garment_back, tp->y_garment, &tp->back);

    int B = static_cast<int>(P.blocks.size());
    tp->x.assign(B + 1, {});
    tp->u.assign(B, {});
    tp->h.assign(B, {});
    tp->g.assign(B, {});
    for (int i = 0; i < m; ++i) {
        tp->y_view.push_back(attn::build_condition_tokens(
            cond.garment_embed, cond.camera_tokens[i], P.cond_mlp));
        attn::Feature pose_tok = to_tokens(cond.pose[i]);
        tp->pose_tokens.push_back(pose_tok);
        int c = cfg.latent_channels();
        attn::Feature in(pose_tok.rows(), 3 * c);
        in.leftCols(c) = to_tokens(z_t[i]);
        in.middleCols(c, c) = affine(pose_tok, P.pose_w, P.pose_b);
        in.rightCols(c) = to_tokens(cond.agnostic[i]);
        tp->input_tokens.push_back(in);
        tp->stem_out.push_back(affine(in, P.stem_w, P.stem_b));
        tp->x[0].push_back(film(tp->stem_out.back(), P, ts[i]));
    }
    for (int b = 0; b < B; ++b) {
        const BlockParams& blk = P.blocks[b];
        attn::MultiViewFeatures mvf;
        for (int i = 0; i < m; ++i) {
            tp->u[b].push_back(affine(tp->x[b][i], blk.lin_in_w, blk.lin_in_b));
            mvf.views.push_back(tp->u[b][i]);
        }
        attn::MultiViewFeatures mv = attn::mv_attention(
            mvf, tp->front.u[b], tp->back.u[b], cond.correlation, blk.mv);
        for (int i = 0; i < m; ++i) {
            tp->h[b].push_back(tp->u[b][i] + mv.views[i]);
            attn::Feature cr = attn::cross_attention(tp->h[b][i], tp->y_view[i], blk.cross);
            tp->g[b].push_back(tp->h[b][i] + cr);
            tp->x[b + 1].push_back(tp->g[b][i] +
                                   affine(tp->g[b][i], blk.lin_out_w, blk.lin_out_b));
        }
    }
    std::vector<LatentImage> out;
    for (int i = 0; i < m; ++i) {
        tp->eps_tok.push_back(affine(tp->x[B][i], P.head_w, P.head_b));
        out.push_back(from_tokens(tp->eps_tok[i], h, w));
    }
    return out;
}

void backward(const ToyDenoiser& model, const ConditioningBundle& cond,
              const std::vector<int>& ts, const Tape& tp,
              const std::vector<attn::Feature>& d_eps_tok, DenoiserParams* g) {
    const DenoiserConfig& cfg = model.config;
    const DenoiserParams& P = model.params;
    int m = cond.view_count();
    int B = static_cast<int>(P.blocks.size());
    int c = cfg.latent_channels();

    std::vector<attn::Feature> dx(m);
    for (int i = 0; i < m; ++i) {
        g->head_w += tp.x[B][i].transpose() * d_eps_tok[i];
        g->head_b += d_eps_tok[i].colwise().sum();
        dx[i] = d_eps_tok[i] * P.head_w.transpose();
    }

    std::vector<attn::Feature> dy_view(m);
    for (int i = 0; i < m; ++i)
        dy_view[i] = attn::Feature::Zero(tp.y_view[i].tokens.rows(),
                                         tp.y_view[i].tokens.cols());
    std::vector<attn::Feature> cache_front(B), cache_back(B);

    for (int b = B - 1; b >= 0; --b) {
        const BlockParams& blk = P.blocks[b];
        BlockParams& gb = g->blocks[b];
        attn::MultiViewFeatures up;
        std::vector<attn::Feature> dh(m);
        for (int i = 0; i < m; ++i) {
            attn::Feature dgg = dx[i] + dx[i] * blk.lin_out_w.transpose();
            gb.lin_out_w += tp.g[b][i].transpose() * dx[i];
            gb.lin_out_b += dx[i].colwise().sum();
            attn::CrossAttentionGrads cg =
                attn::cross_attention_grad(tp.h[b][i], tp.y_view[i], blk.cross, dgg);
            dh[i] = dgg + cg.queries;
            dy_view[i] += cg.cond_tokens;
            gb.cross.wq += cg.wq;
            gb.cross.wk += cg.wk;
            gb.cross.wv += cg.wv;
            up.views.push_back(dh[i]);
        }
        attn::MultiViewFeatures mvf;
        for (int i = 0; i < m; ++i) mvf.views.push_back(tp.u[b][i]);
        attn::MvAttentionGrads mg = attn::mv_attention_grad(
            mvf, tp.front.u[b], tp.back.u[b], cond.correlation, blk.mv, up);
        cache_front[b] = mg.garment_front;
        cache_back[b] = mg.garment_back;
        gb.mv.wq += mg.wq;
        gb.mv.wk += mg.wk;
        gb.mv.wv += mg.wv;
        for (int i = 0; i < m; ++i) {
            attn::Feature du = dh[i] + mg.features.views[i];
            dx[i] = du * blk.lin_in_w.transpose();
            gb.lin_in_w += tp.x[b][i].transpose() * du;
            gb.lin_in_b += du.colwise().sum();
        }
    }

    for (int i = 0; i < m; ++i) {
        attn::Feature ds;
        film_backward(tp.stem_out[i], dx[i], P, ts[i], &ds, g);
        g->stem_w += tp.input_tokens[i].transpose() * ds;
        g->stem_b += ds.colwise().sum();
        attn::Feature din = ds * P.stem_w.transpose();
        attn::Feature dpose = din.middleCols(c, c);
        g->pose_w += tp.pose_tokens[i].transpose() * dpose;
        g->pose_b += dpose.colwise().sum();
        // z_t and agnostic slots are inputs; their grads stop here
    }

    attn::Feature dy_garment = attn::Feature::Zero(tp.y_garment.tokens.rows(),
                                                   tp.y_garment.tokens.cols());
    trunk_backward(P, cfg, tp.front, tp.y_garment, cache_front, g, &dy_garment);
    trunk_backward(P, cfg, tp.back, tp.y_garment, cache_back, g, &dy_garment);

    for (int i = 0; i < m; ++i) {
        attn::ConditionTokenGrads cg = attn::build_condition_tokens_grad(
            cond.garment_embed, cond.camera_tokens[i], P.cond_mlp, dy_view[i]);
        g->cond_mlp.w1 += cg.mlp.w1;
        g->cond_mlp.b1 += cg.mlp.b1;
        g->cond_mlp.w2 += cg.mlp.w2;
        g->cond_mlp.b2 += cg.mlp.b2;
    }
    attn::ConditionTokenGrads cgg = attn::build_condition_tokens_grad(
        cond.garment_embed, tp.cam_identity, P.cond_mlp, dy_garment);
    g->cond_mlp.w1 += cgg.mlp.w1;
    g->cond_mlp.b1 += cgg.mlp.b1;
    g->cond_mlp.w2 += cgg.mlp.w2;
    g->cond_mlp.b2 += cgg.mlp.b2;
    // garment embeddings come from the fixed seeded embedder: not trained
}

void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u32(std::ofstream& f, std::uint32_t v) { put_bytes(f, &v, 4); }

}  // namespace

void NoiseSchedule::validate() const {
    require(alpha.size() >= 1 && alpha.size() == sigma.size(),
            "schedule: alpha/sigma sizes disagree");
    for (int t = 0; t < timesteps(); ++t) {
        double vp = alpha[t] * alpha[t] + sigma[t] * sigma[t];
        require(std::abs(vp - 1.0) <= 1e-9, "schedule: not variance preserving");
        if (t > 0)
            require(alpha[t] < alpha[t - 1] && sigma[t] > sigma[t - 1],
                    "schedule: alpha must strictly decrease, sigma increase");
    }
}

NoiseSchedule cosine_schedule(int timesteps) {
    require(timesteps >= 1, "schedule: need at least one step");
    NoiseSchedule s;
    s.alpha.resize(timesteps);
    s.sigma.resize(timesteps);
    for (int t = 0; t < timesteps; ++t) {
        double theta = (M_PI / 2.0) * (t + 1) / (timesteps + 1);
        s.alpha[t] = std::cos(theta);
        s.sigma[t] = std::sin(theta);
    }
    s.validate();
    return s;
}

LatentImage forward_noising(const LatentImage& z0, int t, const LatentImage& eps,
                            const NoiseSchedule& schedule) {
    require(t >= 0 && t < schedule.timesteps(), "forward_noising: t out of range");
    require(z0.same_shape(eps), "forward_noising: shape mismatch");
    LatentImage out = z0;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = schedule.alpha[t] * z0.data[i] + schedule.sigma[t] * eps.data[i];
    return out;
}

LatentImage ToyAutoencoder::encode(const Image& x) const {
    require(patch >= 1, "autoencoder: patch must be positive");
    require(x.height % patch == 0 && x.width % patch == 0,
            "autoencoder: image dims not divisible by patch");
    int p = patch, H = x.height / p, W = x.width / p;
    LatentImage z(x.channels * p * p, H, W, 0.0);
    for (int c = 0; c < x.channels; ++c)
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                for (int Y = 0; Y < H; ++Y)
                    for (int X = 0; X < W; ++X)
                        z.at((c * p + dy) * p + dx, Y, X) = x.at(c, Y * p + dy, X * p + dx);
    return z;
}

Image ToyAutoencoder::decode(const LatentImage& z) const {
    require(patch >= 1, "autoencoder: patch must be positive");
    require(z.channels % (patch * patch) == 0,
            "autoencoder: latent channels not divisible by patch^2");
    int p = patch, C = z.channels / (p * p);
    Image x(C, z.height * p, z.width * p, 0.0);
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < p; ++dy)
            for (int dx = 0; dx < p; ++dx)
                for (int Y = 0; Y < z.height; ++Y)
                    for (int X = 0; X < z.width; ++X)
                        x.at(c, Y * p + dy, X * p + dx) = z.at((c * p + dy) * p + dx, Y, X);
    return x;
}

LatentImage encode_pose(const Image& normal_map, const PoseEncoderParams& params) {
    ToyAutoencoder ae{params.patch};
    LatentImage patched = ae.encode(normal_map);
    require(params.w.rows() == patched.channels,
            "pose encoder: weight rows must match patchified channels");
    require(params.w.cols() == params.b.size(), "pose encoder: bias width mismatch");
    attn::Feature tok = affine(to_tokens(patched), params.w, params.b);
    return from_tokens(tok, patched.height, patched.width);
}

PoseEncoderGrads encode_pose_grad(const Image& normal_map, const PoseEncoderParams& params,
                                  const LatentImage& upstream) {
    ToyAutoencoder ae{params.patch};
    LatentImage patched = ae.encode(normal_map);
    require(params.w.rows() == patched.channels,
            "pose encoder: weight rows must match patchified channels");
    require(upstream.channels == params.w.cols() && upstream.height == patched.height &&
                upstream.width == patched.width,
            "pose encoder: upstream shape mismatch");
    attn::Feature tok = to_tokens(patched);
    attn::Feature up = to_tokens(upstream);
    PoseEncoderGrads g;
    g.w = tok.transpose() * up;
    g.b = up.colwise().sum();
    attn::Feature dtok = up * params.w.transpose();
    g.normal_map = ae.decode(from_tokens(dtok, patched.height, patched.width));
    return g;
}

void DenoiserConfig::validate() const {
    require(blocks >= 1, "denoiser config: need at least one block");
    require(timesteps >= 1, "denoiser config: need at least one timestep");
    require(patch >= 1, "denoiser config: patch must be positive");
    require(image_channels >= 1, "denoiser config: image channels must be positive");
    require(cond_dim >= 1 && cond_hidden >= 1, "denoiser config: condition widths");
    require(freq_count >= 1, "denoiser config: need at least one frequency");
}

void for_each_param(DenoiserParams& p,
                    const std::function<void(const std::string&, double*, int, int)>& fn) {
    auto mat = [&](const std::string& n, Eigen::MatrixXd& m) {
        fn(n, m.data(), static_cast<int>(m.rows()), static_cast<int>(m.cols()));
    };
    auto row = [&](const std::string& n, Eigen::RowVectorXd& v) {
        fn(n, v.data(), 1, static_cast<int>(v.size()));
    };
    mat("stem_w", p.stem_w);
    row("stem_b", p.stem_b);
    mat("time_scale", p.time_scale);
    mat("time_shift", p.time_shift);
    mat("pose_w", p.pose_w);
    row("pose_b", p.pose_b);
    mat("cond_mlp_w1", p.cond_mlp.w1);
    row("cond_mlp_b1", p.cond_mlp.b1);
    mat("cond_mlp_w2", p.cond_mlp.w2);
    row("cond_mlp_b2", p.cond_mlp.b2);
    mat("head_w", p.head_w);
    row("head_b", p.head_b);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "block%02zu/", i);
        std::string pre(buf);
        BlockParams& b = p.blocks[i];
        mat(pre + "lin_in_w", b.lin_in_w);
        row(pre + "lin_in_b", b.lin_in_b);
        mat(pre + "mv_wq", b.mv.wq);
        mat(pre + "mv_wk", b.mv.wk);
        mat(pre + "mv_wv", b.mv.wv);
        mat(pre + "cross_wq", b.cross.wq);
        mat(pre + "cross_wk", b.cross.wk);
        mat(pre + "cross_wv", b.cross.wv);
        mat(pre + "lin_out_w", b.lin_out_w);
        row(pre + "lin_out_b", b.lin_out_b);
    }
}

DenoiserParams zeros_like(const DenoiserParams& p) {
    DenoiserParams z = p;
    for_each_param(z, [](const std::string&, double* d, int r, int c) {
        std::fill(d, d + static_cast<std::size_t>(r) * c, 0.0);
    });
    return z;
}

ToyDenoiser init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix64(seed, 0xD41f0153u));
    auto mat = [&](int r, int c, double scale = 1.0) {
        Eigen::MatrixXd m(r, c);
        double s = scale / std::sqrt(static_cast<double>(r));
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = rng.normal() * s;
        return m;
    };
    int d = cfg.model_dim(), c = cfg.latent_channels();
    ToyDenoiser model;
    model.config = cfg;
    model.schedule = cosine_schedule(cfg.timesteps);
    DenoiserParams& p = model.params;
    p.stem_w = mat(cfg.input_channels(), d);
    p.stem_b = Eigen::RowVectorXd::Zero(d);
    p.time_scale = Eigen::MatrixXd::Zero(cfg.timesteps, d);
    p.time_shift = Eigen::MatrixXd::Zero(cfg.timesteps, d);
    p.pose_w = mat(c, c);
    p.pose_b = Eigen::RowVectorXd::Zero(c);
    p.cond_mlp.w1 = mat(cfg.camera_dim(), cfg.cond_hidden);
    p.cond_mlp.b1 = Eigen::RowVectorXd::Zero(cfg.cond_hidden);
    p.cond_mlp.w2 = mat(cfg.cond_hidden, cfg.cond_dim);
    p.cond_mlp.b2 = Eigen::RowVectorXd::Zero(cfg.cond_dim);
    p.head_w = mat(d, c, 0.1);  // small head keeps the initial prediction near zero
    p.head_b = Eigen::RowVectorXd::Zero(c);
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockParams blk;
        blk.lin_in_w = mat(d, d);
        blk.lin_in_b = Eigen::RowVectorXd::Zero(d);
        blk.mv.wq = mat(d, d);
        blk.mv.wk = mat(d, d);
        blk.mv.wv = mat(d, d);
        blk.cross.wq = mat(d, d);
        blk.cross.wk = mat(cfg.cond_dim, d);
        blk.cross.wv = mat(cfg.cond_dim, d);
        blk.lin_out_w = mat(d, d);
        blk.lin_out_b = Eigen::RowVectorXd::Zero(d);
        p.blocks.push_back(std::move(blk));
    }
    model.opt.step = 0;
    model.opt.m = zeros_like(p);
    model.opt.v = zeros_like(p);
    return model;
}

ConditioningBundle make_conditioning(const std::vector<Image>& normals,
                                     const std::vector<Image>& agnostics,
                                     const Image& garment_front, const Image& garment_back,
                                     const camera::ViewRig& rig, const DenoiserConfig& cfg) {
    cfg.validate();
    std::size_t m = normals.size();
    require(m >= 1, "conditioning: need at least one view");
    require(agnostics.size() == m && static_cast<std::size_t>(rig.size()) == m,
            "conditioning: per-view input counts disagree");
    ToyAutoencoder ae{cfg.patch};
    ConditioningBundle cond;
    cond.garment_front = ae.encode(garment_front);
    cond.garment_back = ae.encode(garment_back);
    metrics::ToyEmbedder embedder(cfg.embed_seed, cfg.cond_dim);
    cond.garment_embed.resize(2, cfg.cond_dim);
    cond.garment_embed.row(0) = embedder.embed(garment_front).transpose();
    cond.garment_embed.row(1) = embedder.embed(garment_back).transpose();
    for (std::size_t i = 0; i < m; ++i) {
        cond.pose.push_back(ae.encode(normals[i]));
        cond.agnostic.push_back(ae.encode(agnostics[i]));
        cond.camera_tokens.push_back(
            camera::encode_camera_rotation(rig.views[i].R, cfg.freq_count));
    }
    cond.correlation = camera::build_correlation_matrix(rig);
    return cond;
}

std::vector<LatentImage> denoise_eps(const ToyDenoiser& model, const ConditioningBundle& cond,
                                     const std::vector<LatentImage>& z_t,
                                     const std::vector<int>& ts) {
    Tape tp;
    return forward(model, cond, z_t, ts, &tp);
}

namespace {

double loss_and_upstream(const Tape& tp, const std::vector<LatentImage>& eps,
                         std::vector<attn::Feature>* d_eps_tok) {
    std::size_t m = eps.size();
    double total_elems = 0.0;
    for (const LatentImage& e : eps) total_elems += static_cast<double>(e.data.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        attn::Feature diff = tp.eps_tok[i] - to_tokens(eps[i]);
        loss += diff.squaredNorm();
        if (d_eps_tok) d_eps_tok->push_back(2.0 * diff / total_elems);
    }
    return loss / total_elems;
}

}  // namespace

double ldm_loss(const ToyDenoiser& model, const ConditioningBundle& cond,
                const std::vector<LatentImage>& z0, const std::vector<int>& ts,
                const std::vector<LatentImage>& eps) {
    require(z0.size() == eps.size(), "ldm_loss: z0/eps counts disagree");
    std::vector<LatentImage> z_t;
    for (std::size_t i = 0; i < z0.size(); ++i)
        z_t.push_back(forward_noising(z0[i], ts[i], eps[i], model.schedule));
    Tape tp;
    forward(model, cond, z_t, ts, &tp);
    return loss_and_upstream(tp, eps, nullptr);
}

double ldm_loss_grad(const ToyDenoiser& model, const ConditioningBundle& cond,
                     const std::vector<LatentImage>& z0, const std::vector<int>& ts,
                     const std::vector<LatentImage>& eps, DenoiserParams* grads) {
    require(z0.size() == eps.size(), "ldm_loss: z0/eps counts disagree");
    require(grads != nullptr, "ldm_loss_grad: null gradient sink");
    std::vector<LatentImage> z_t;
    for (std::size_t i = 0; i < z0.size(); ++i)
        z_t.push_back(forward_noising(z0[i], ts[i], eps[i], model.schedule));
    Tape tp;
    forward(model, cond, z_t, ts, &tp);
    std::vector<attn::Feature> d_eps_tok;
    double loss = loss_and_upstream(tp, eps, &d_eps_tok);
    backward(model, cond, ts, tp, d_eps_tok, grads);
    return loss;
}

namespace {

void adam_update(DenoiserParams& p, DenoiserParams& g, AdamState& st, double lr) {
    ++st.step;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    struct Slot {
        double *p, *g, *m, *v;
        std::size_t n;
    };
    std::vector<Slot> slots;
    std::size_t k = 0;
    for_each_param(p, [&](const std::string&, double* d, int r, int c) {
        slots.push_back({d, nullptr, nullptr, nullptr, static_cast<std::size_t>(r) * c});
    });
    for_each_param(g, [&](const std::string&, double* d, int, int) { slots[k++].g = d; });
    k = 0;
    for_each_param(st.m, [&](const std::string&, double* d, int, int) { slots[k++].m = d; });
    k = 0;
    for_each_param(st.v, [&](const std::string&, double* d, int, int) { slots[k++].v = d; });
    for (Slot& s : slots)
        for (std::size_t i = 0; i < s.n; ++i) {
            s.m[i] = b1 * s.m[i] + (1.0 - b1) * s.g[i];
            s.v[i] = b2 * s.v[i] + (1.0 - b2) * s.g[i] * s.g[i];
            s.p[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps);
        }
}

}  // namespace

std::vector<double> train(ToyDenoiser& model, const TrainingSet& data,
                          const TrainOptions& opts) {
    require(!data.empty(), "train: empty dataset");
    require(opts.steps >= 0, "train: negative step count");
    require(opts.stage == 1 || opts.stage == 2, "train: stage must be 1 or 2");
    require(opts.views_per_step >= 1, "train: views_per_step must be positive");
    require(opts.lr >= 0.0, "train: negative learning rate");
    for (const TrainingItem& item : data) {
        require(!item.views.empty() && item.normals.size() == item.views.size() &&
                    item.agnostics.size() == item.views.size() &&
                    static_cast<std::size_t>(item.rig.size()) == item.views.size(),
                "train: item view lists disagree");
    }
    ToyAutoencoder ae{model.config.patch};
    std::vector<double> trace;
    for (int s = 0; s < opts.steps; ++s) {
        std::uint64_t abs_step = model.opt.step;
        const TrainingItem& item =
            data[static_cast<std::size_t>(mix64(opts.seed, abs_step, 1) % data.size())];
        int n = static_cast<int>(item.views.size());
        int t = static_cast<int>(mix64(opts.seed, abs_step, 2) %
                                 static_cast<std::uint64_t>(model.config.timesteps));
        std::vector<int> idx;
        if (opts.stage == 1) {
            idx = {static_cast<int>(mix64(opts.seed, abs_step, 3) %
                                    static_cast<std::uint64_t>(n))};
        } else {
            int m = std::min(opts.views_per_step, n);
            std::vector<int> all(n);
            std::iota(all.begin(), all.end(), 0);
            Rng r(mix64(opts.seed, abs_step, 3));
            for (int k2 = 0; k2 < m; ++k2)
                std::swap(all[k2], all[k2 + static_cast<int>(r.below(
                                                static_cast<std::uint64_t>(n - k2)))]);
            idx.assign(all.begin(), all.begin() + m);
        }
        std::vector<Image> normals, agnostics;
        camera::ViewRig rig;
        rig.intrinsics = item.rig.intrinsics;
        std::vector<LatentImage> z0, eps;
        std::vector<int> ts;
        for (std::size_t j = 0; j < idx.size(); ++j) {
            int vi = idx[j];
            normals.push_back(item.normals[vi]);
            agnostics.push_back(item.agnostics[vi]);
            rig.views.push_back(item.rig.views[vi]);
            z0.push_back(ae.encode(item.views[vi]));
            Rng er(mix64(opts.seed, abs_step, 100 + j));
            LatentImage e(z0.back().channels, z0.back().height, z0.back().width, 0.0);
            for (double& v : e.data) v = er.normal();
            eps.push_back(std::move(e));
            ts.push_back(t);
        }
        ConditioningBundle cond =
            make_conditioning(normals, agnostics, item.garment_front, item.garment_back,
                              rig, model.config);
        DenoiserParams g = zeros_like(model.params);
        double loss = ldm_loss_grad(model, cond, z0, ts, eps, &g);
        adam_update(model.params, g, model.opt, opts.lr);
        trace.push_back(loss);
    }
    return trace;
}

std::vector<LatentImage> ddim_sample_fn(const NoiseSchedule& schedule, const DenoiseFn& fn,
                                        int channels, int height, int width, int views,
                                        int steps, std::uint64_t seed,
                                        const std::vector<std::uint64_t>* noise_keys) {
    schedule.validate();
    int T = schedule.timesteps();
    require(steps >= 1, "ddim: steps must be positive");
    require(steps <= T, "ddim: steps exceed the schedule length");
    require(views >= 1 && channels >= 1 && height >= 1 && width >= 1,
            "ddim: degenerate latent shape");
    require(noise_keys == nullptr || static_cast<int>(noise_keys->size()) == views,
            "ddim: noise key count mismatch");
    std::vector<LatentImage> z;
    for (int i = 0; i < views; ++i) {
        std::uint64_t key = noise_keys ? (*noise_keys)[i] : static_cast<std::uint64_t>(i);
        Rng r(mix64(seed, key, 0xDD13u));
        LatentImage zi(channels, height, width, 0.0);
        for (double& v : zi.data) v = r.normal();
        z.push_back(std::move(zi));
    }
    std::vector<int> tau(steps);
    for (int k = 0; k < steps; ++k)
        tau[k] = static_cast<int>((static_cast<long>(k + 1) * T) / steps) - 1;
    for (int j = steps - 1; j >= 0; --j) {
        int t = tau[j];
        double a = schedule.alpha[t], s = schedule.sigma[t];
        expect(a > 1e-12, "ddim: schedule alpha vanished at a visited step");
        std::vector<LatentImage> eps_hat = fn(z, t);
        require(eps_hat.size() == z.size(), "ddim: denoiser returned wrong view count");
        for (int i = 0; i < views; ++i) {
            require(eps_hat[i].same_shape(z[i]), "ddim: denoiser changed latent shape");
            double ap = (j > 0) ? schedule.alpha[tau[j - 1]] : 1.0;
            double sp = (j > 0) ? schedule.sigma[tau[j - 1]] : 0.0;
            for (std::size_t e = 0; e < z[i].data.size(); ++e) {
                double z0_hat = (z[i].data[e] - s * eps_hat[i].data[e]) / a;
                z[i].data[e] = ap * z0_hat + sp * eps_hat[i].data[e];
            }
        }
    }
    return z;
}

std::vector<LatentImage> ddim_sample(const ToyDenoiser& model, const ConditioningBundle& cond,
                                     int steps, std::uint64_t seed,
                                     const std::vector<std::uint64_t>* noise_keys) {
    int m = cond.view_count();
    require(m >= 1, "ddim: empty conditioning");
    const LatentImage& like = cond.agnostic[0];
    DenoiseFn fn = [&](const std::vector<LatentImage>& z, int t) {
        std::vector<int> ts(z.size(), t);
        return denoise_eps(model, cond, z, ts);
    };
    return ddim_sample_fn(model.schedule, fn, model.config.latent_channels(), like.height,
                          like.width, m, steps, seed, noise_keys);
}

namespace {

struct Blob {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> data;
};

void collect_params(const DenoiserParams& p, const std::string& prefix,
                    std::vector<Blob>* blobs) {
    auto& mut = const_cast<DenoiserParams&>(p);  // visitor only reads
    for_each_param(mut, [&](const std::string& n, double* d, int r, int c) {
        Blob b;
        b.name = prefix + n;
        b.dims = {static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)};
        b.data.assign(d, d + static_cast<std::size_t>(r) * c);
        blobs->push_back(std::move(b));
    });
}

Blob scalar_blob(const std::string& name, double v) { return {name, {1}, {v}}; }

}  // namespace

void save_checkpoint(const std::string& path, const ToyDenoiser& model) {
    const DenoiserConfig& cfg = model.config;
    std::vector<Blob> blobs;
    collect_params(model.params, "", &blobs);
    collect_params(model.opt.m, "adam/m/", &blobs);
    collect_params(model.opt.v, "adam/v/", &blobs);
    blobs.push_back(scalar_blob("adam/step", static_cast<double>(model.opt.step)));
    blobs.push_back(scalar_blob("hyper/blocks", cfg.blocks));
    blobs.push_back(scalar_blob("hyper/timesteps", cfg.timesteps));
    blobs.push_back(scalar_blob("hyper/patch", cfg.patch));
    blobs.push_back(scalar_blob("hyper/image_channels", cfg.image_channels));
    blobs.push_back(scalar_blob("hyper/cond_dim", cfg.cond_dim));
    blobs.push_back(scalar_blob("hyper/cond_hidden", cfg.cond_hidden));
    blobs.push_back(scalar_blob("hyper/freq_count", cfg.freq_count));
    expect(cfg.embed_seed < (1ull << 53), "checkpoint: embed seed exceeds double range");
    blobs.push_back(scalar_blob("hyper/embed_seed", static_cast<double>(cfg.embed_seed)));
    // record the fixed input concatenation order in the blob name itself
    blobs.push_back(scalar_blob("meta/input_order_zt_pose_agnostic", 1.0));
    std::sort(blobs.begin(), blobs.end(),
              [](const Blob& a, const Blob& b) { return a.name < b.name; });
    std::ofstream f(path, std::ios::binary);
    expect(f.good(), "checkpoint: cannot open for writing: " + path);
    f.write("MVTK", 4);
    put_u32(f, 1);
    for (const Blob& b : blobs) {
        put_u32(f, static_cast<std::uint32_t>(b.name.size()));
        put_bytes(f, b.name.data(), b.name.size());
        put_u32(f, static_cast<std::uint32_t>(b.dims.size()));
        for (std::uint32_t d : b.dims) put_u32(f, d);
        put_bytes(f, b.data.data(), b.data.size() * sizeof(double));
    }
    expect(f.good(), "checkpoint: write failure: " + path);
}

ToyDenoiser load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "checkpoint: cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    expect(f.gcount() == 4 && std::memcmp(magic, "MVTK", 4) == 0,
           "checkpoint: bad magic");
    std::uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    expect(f.gcount() == 4 && version == 1, "checkpoint: unsupported version");
    std::map<std::string, Blob> blobs;
    while (true) {
        std::uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), 4);
        if (f.gcount() == 0 && f.eof()) break;
        expect(f.gcount() == 4 && name_len > 0 && name_len < 4096,
               "checkpoint: truncated blob name");
        Blob b;
        b.name.resize(name_len);
        f.read(b.name.data(), name_len);
        expect(f.gcount() == static_cast<std::streamsize>(name_len),
               "checkpoint: truncated blob name");
        std::uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), 4);
        expect(f.gcount() == 4 && rank >= 1 && rank <= 8, "checkpoint: bad blob rank");
        std::size_t count = 1;
        b.dims.resize(rank);
        for (std::uint32_t i = 0; i < rank; ++i) {
            f.read(reinterpret_cast<char*>(&b.dims[i]), 4);
            expect(f.gcount() == 4, "checkpoint: truncated dims");
            count *= b.dims[i];
        }
        expect(count <= (1ull << 30), "checkpoint: blob too large");
        b.data.resize(count);
        f.read(reinterpret_cast<char*>(b.data.data()),
               static_cast<std::streamsize>(count * sizeof(double)));
        expect(f.gcount() == static_cast<std::streamsize>(count * sizeof(double)),
               "checkpoint: truncated blob data");
        blobs[b.name] = std::move(b);
    }
    auto scalar = [&](const std::string& name) {
        auto it = blobs.find(name);
        expect(it != blobs.end(), "checkpoint: missing " + name);
        expect(it->second.data.size() == 1, "checkpoint: " + name + " is not scalar");
        return it->second.data[0];
    };
    DenoiserConfig cfg;
    cfg.blocks = static_cast<int>(scalar("hyper/blocks"));
    cfg.timesteps = static_cast<int>(scalar("hyper/timesteps"));
    cfg.patch = static_cast<int>(scalar("hyper/patch"));
    cfg.image_channels = static_cast<int>(scalar("hyper/image_channels"));
    cfg.cond_dim = static_cast<int>(scalar("hyper/cond_dim"));
    cfg.cond_hidden = static_cast<int>(scalar("hyper/cond_hidden"));
    cfg.freq_count = static_cast<int>(scalar("hyper/freq_count"));
    cfg.embed_seed = static_cast<std::uint64_t>(scalar("hyper/embed_seed"));
    ToyDenoiser model = init_denoiser(cfg, 0);
    model.opt.step = static_cast<std::uint64_t>(scalar("adam/step"));
    auto fill = [&](DenoiserParams& p, const std::string& prefix) {
        for_each_param(p, [&](const std::string& n, double* d, int r, int c) {
            auto it = blobs.find(prefix + n);
            expect(it != blobs.end(), "checkpoint: missing tensor " + prefix + n);
            const Blob& b = it->second;
            expect(b.dims.size() == 2 && b.dims[0] == static_cast<std::uint32_t>(r) &&
                       b.dims[1] == static_cast<std::uint32_t>(c),
                   "checkpoint: shape mismatch for " + prefix + n);
            std::copy(b.data.begin(), b.data.end(), d);
        });
    };
    fill(model.params, "");
    fill(model.opt.m, "adam/m/");
    fill(model.opt.v, "adam/v/");
    return model;
}

}  // namespace mvtk::diff
