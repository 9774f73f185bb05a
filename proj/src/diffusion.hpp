#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"
#include "mvattn.hpp"

namespace mvtk::diff {

// Latents share the image container: planar [channel, height, width].
using LatentImage = Image;

// Variance-preserving schedule: alpha strictly decreasing, sigma strictly
// increasing, alpha^2 + sigma^2 = 1 at every step.
struct NoiseSchedule {
    Eigen::VectorXd alpha, sigma;
    int timesteps() const { return static_cast<int>(alpha.size()); }
    void validate() const;
};

// alpha_t = cos(theta), sigma_t = sin(theta) with theta swept over (0, pi/2)
// exclusive, so alpha never reaches 0 and the DDIM x0 estimate stays finite.
NoiseSchedule cosine_schedule(int timesteps);

// alpha_t * z0 + sigma_t * eps
LatentImage forward_noising(const LatentImage& z0, int t, const LatentImage& eps,
                            const NoiseSchedule& schedule);

// Lossless space-to-depth: (c, h, w) <-> (c*p*p, h/p, w/p). Latent channel
// (c*p + dy)*p + dx holds input pixel (c, y*p+dy, x*p+dx).
struct ToyAutoencoder {
    int patch = 4;
    LatentImage encode(const Image& x) const;
    Image decode(const LatentImage& z) const;
};

// Space-to-depth patchify followed by one affine layer across channels.
struct PoseEncoderParams {
    int patch = 4;
    Eigen::MatrixXd w;     // (in_channels*p*p) x out_channels
    Eigen::RowVectorXd b;  // out_channels
};

LatentImage encode_pose(const Image& normal_map, const PoseEncoderParams& params);

struct PoseEncoderGrads {
    Eigen::MatrixXd w;
    Eigen::RowVectorXd b;
    Image normal_map;
};

PoseEncoderGrads encode_pose_grad(const Image& normal_map, const PoseEncoderParams& params,
                                  const LatentImage& upstream);

struct DenoiserConfig {
    int blocks = 2;
    int timesteps = 8;
    int patch = 4;
    int image_channels = 3;
    int cond_dim = 64;               // garment embedding width, the Y token width
    int cond_hidden = 64;            // camera-token MLP hidden width
    int freq_count = 2;              // camera rotation encoding frequencies
    std::uint64_t embed_seed = 2024; // seeds the garment embedder behind F^g

    int latent_channels() const { return image_channels * patch * patch; }
    int model_dim() const { return latent_channels(); }
    int input_channels() const { return 3 * latent_channels(); }
    int camera_dim() const { return 18 * freq_count; }
    void validate() const;
};

// One denoiser block: per-token linear in, multi-view attention, camera
// cross-attention, per-token linear out, with additive skips around the
// attention stages and the output linear.
struct BlockParams {
    Eigen::MatrixXd lin_in_w;
    Eigen::RowVectorXd lin_in_b;
    attn::AttentionParams mv;
    attn::AttentionParams cross;
    Eigen::MatrixXd lin_out_w;
    Eigen::RowVectorXd lin_out_b;
};

struct DenoiserParams {
    Eigen::MatrixXd stem_w;  // input_channels x model_dim
    Eigen::RowVectorXd stem_b;
    Eigen::MatrixXd time_scale, time_shift;  // timesteps x model_dim, FiLM rows
    Eigen::MatrixXd pose_w;                  // pose affine, trained with the rest
    Eigen::RowVectorXd pose_b;
    attn::MlpParams cond_mlp;  // camera token -> one condition token
    Eigen::MatrixXd head_w;    // model_dim x latent_channels
    Eigen::RowVectorXd head_b;
    std::vector<BlockParams> blocks;
};

// Visits every tensor as (name, data pointer, rows, cols) in a fixed order.
// Checkpoints, the optimizer, and gradient tests all walk this enumeration.
void for_each_param(DenoiserParams& p,
                    const std::function<void(const std::string&, double*, int, int)>& fn);

DenoiserParams zeros_like(const DenoiserParams& p);

struct AdamState {
    std::uint64_t step = 0;
    DenoiserParams m, v;
};

struct ToyDenoiser {
    DenoiserConfig config;
    NoiseSchedule schedule;
    DenoiserParams params;
    AdamState opt;  // persisted so resumed training continues bit-exactly
};

ToyDenoiser init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed);

// Everything the denoiser consumes besides the noisy latents: garment
// latents, the garment embedding tokens F^g, per-view patchified normal maps
// (the learned pose affine lives in the model), per-view agnostic latents,
// per-view camera tokens, and the view correlation matrix.
struct ConditioningBundle {
    LatentImage garment_front, garment_back;
    attn::Feature garment_embed;  // 2 x cond_dim
    std::vector<LatentImage> pose;
    std::vector<LatentImage> agnostic;
    std::vector<Eigen::VectorXd> camera_tokens;
    Eigen::MatrixXd correlation;

    int view_count() const { return static_cast<int>(pose.size()); }
};

ConditioningBundle make_conditioning(const std::vector<Image>& normals,
                                     const std::vector<Image>& agnostics,
                                     const Image& garment_front, const Image& garment_back,
                                     const camera::ViewRig& rig, const DenoiserConfig& cfg);

// Predicted noise for each view's z_t at per-view timesteps.
std::vector<LatentImage> denoise_eps(const ToyDenoiser& model, const ConditioningBundle& cond,
                                     const std::vector<LatentImage>& z_t,
                                     const std::vector<int>& ts);

// Mean squared error between eps and the prediction on z_t built from
// (z0, t, eps); mean over every element of every view.
double ldm_loss(const ToyDenoiser& model, const ConditioningBundle& cond,
                const std::vector<LatentImage>& z0, const std::vector<int>& ts,
                const std::vector<LatentImage>& eps);

// Same loss plus reverse-mode gradients for every parameter tensor.
double ldm_loss_grad(const ToyDenoiser& model, const ConditioningBundle& cond,
                     const std::vector<LatentImage>& z0, const std::vector<int>& ts,
                     const std::vector<LatentImage>& eps, DenoiserParams* grads);

struct TrainingItem {
    std::vector<Image> views, normals, agnostics;
    Image garment_front, garment_back;
    camera::ViewRig rig;
};
using TrainingSet = std::vector<TrainingItem>;

struct TrainOptions {
    int steps = 100;
    double lr = 1e-3;
    int stage = 1;           // 1: one view per step; 2: joint multi-view steps
    int views_per_step = 8;  // stage 2 view count per step
    std::uint64_t seed = 0;
};

// Adam over all parameter tensors. Item, timestep, view subset, and noise at
// absolute step s are all pure functions of (seed, s), and s lives in the
// optimizer state, so training resumes from a checkpoint bit-exactly.
std::vector<double> train(ToyDenoiser& model, const TrainingSet& data,
                          const TrainOptions& opts);

using DenoiseFn =
    std::function<std::vector<LatentImage>(const std::vector<LatentImage>&, int)>;

// DDIM: z starts as seeded Gaussian noise at the last schedule step, each
// update forms z0_hat = (z - sigma_t*eps_hat)/alpha_t and steps to
// alpha_prev*z0_hat + sigma_prev*eps_hat; the final step returns z0_hat.
// Per-view noise is keyed by noise_keys (default: view position), so a view
// keeps its initial noise regardless of how views are batched.
std::vector<LatentImage> ddim_sample_fn(const NoiseSchedule& schedule, const DenoiseFn& fn,
                                        int channels, int height, int width, int views,
                                        int steps, std::uint64_t seed,
                                        const std::vector<std::uint64_t>* noise_keys = nullptr);

std::vector<LatentImage> ddim_sample(const ToyDenoiser& model, const ConditioningBundle& cond,
                                     int steps, std::uint64_t seed,
                                     const std::vector<std::uint64_t>* noise_keys = nullptr);

void save_checkpoint(const std::string& path, const ToyDenoiser& model);
ToyDenoiser load_checkpoint(const std::string& path);

}  // namespace mvtk::diff
