#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "camera.hpp"
#include "image.hpp"

namespace mvtk::metrics {

// Turntable evaluation protocol: 120 uniformly spaced azimuths split into
// front/back/side sectors of 40 views each.
inline constexpr int kProtocolViewCount = 120;

// Deterministic image -> unit vector map. Implementations must be pure and
// return vectors with norm 1 within 1e-9.
class EmbeddingProvider {
  public:
    virtual ~EmbeddingProvider() = default;
    virtual Eigen::VectorXd embed(const Image& img) const = 0;
    virtual int dim() const = 0;
};

// Seeded random projection. Images of any size are average-pooled onto a
// fixed 3x16x16 grid (channels fold into 3 by index mod 3) so garment crops
// and rendered views share one embedding space, then projected with a fixed
// Gaussian matrix and normalized.
class ToyEmbedder : public EmbeddingProvider {
  public:
    explicit ToyEmbedder(std::uint64_t seed, int d = 64);
    Eigen::VectorXd embed(const Image& img) const override;
    int dim() const override { return d_; }

  private:
    int d_;
    Eigen::MatrixXd proj_;  // d x (3*16*16 + 1), the +1 row hits a bias input
};

struct ViewClasses {
    std::vector<int> front, back, side;
};

// Partitions a 120-view uniform rig by azimuth sector: views snap to the
// nearest multiple of 3 degrees; sectors [0,60) and [300,360) face front,
// [120,240) faces back, the rest are side views. Half-open sectors make the
// 40/40/40 split exact for any rig start offset.
ViewClasses classify_views(const camera::ViewRig& rig);

// Mean dot product between the garment embedding and the edited-view
// embeddings over front (against g_f) and back (against g_b) views; side
// views are excluded.
double dino_sim(const Image& g_f, const Image& g_b, const std::vector<Image>& edited,
                const ViewClasses& classes, const EmbeddingProvider& provider);

// Mean dot product of consecutive edit-direction vectors
// (embed(e_i) - embed(o_i)), cyclic over the closed orbit.
double clip_cons(const std::vector<Image>& edited, const std::vector<Image>& original,
                 const EmbeddingProvider& provider);

using ImageDigest = std::array<unsigned char, 32>;

// SHA-256 over the image dimensions and raw little-endian pixel doubles.
ImageDigest image_digest(const Image& img);

// Embedding lookup keyed by image content hash, for vectors computed by an
// external model. Rejects non-unit vectors; unknown images fail at query
// time.
class TableEmbedder : public EmbeddingProvider {
  public:
    explicit TableEmbedder(int d);
    void add(const Image& img, const Eigen::VectorXd& v);
    void save(const std::string& path) const;
    Eigen::VectorXd embed(const Image& img) const override;
    int dim() const override { return d_; }
    std::size_t size() const { return entries_.size(); }

  private:
    friend TableEmbedder load_embeddings(const std::string& path);
    void add_raw(const ImageDigest& digest, const Eigen::VectorXd& v);

    int d_;
    std::map<ImageDigest, Eigen::VectorXd> entries_;
};

TableEmbedder load_embeddings(const std::string& path);

}  // namespace mvtk::metrics
