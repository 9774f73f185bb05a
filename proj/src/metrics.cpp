#include "metrics.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <fstream>

#include "errors.hpp"
#include "rng.hpp"

namespace mvtk::metrics {

namespace {

constexpr int kGrid = 16;
constexpr int kCanon = 3 * kGrid * kGrid;

double wrap_2pi(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    return a < 0 ? a + 2.0 * M_PI : a;
}

// Average-pools one channel plane onto the canonical grid cell (Y, X).
double pool_cell(const Image& img, int c, int Y, int X) {
    int y0 = static_cast<int>(static_cast<long>(Y) * img.height / kGrid);
    int y1 = std::max(y0 + 1, static_cast<int>(static_cast<long>(Y + 1) * img.height / kGrid));
    int x0 = static_cast<int>(static_cast<long>(X) * img.width / kGrid);
    int x1 = std::max(x0 + 1, static_cast<int>(static_cast<long>(X + 1) * img.width / kGrid));
    double sum = 0.0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) sum += img.at(c, y, x);
    return sum / ((y1 - y0) * (x1 - x0));
}

Eigen::VectorXd canonicalize(const Image& img) {
    require(img.channels >= 1 && img.height >= 1 && img.width >= 1,
            "embed: empty image");
    Eigen::VectorXd out(kCanon + 1);
    for (int j = 0; j < 3; ++j) {
        for (int Y = 0; Y < kGrid; ++Y)
            for (int X = 0; X < kGrid; ++X) {
                double v = 0.0;
                if (img.channels >= 3) {
                    int count = 0;
                    for (int c = j; c < img.channels; c += 3, ++count)
                        v += pool_cell(img, c, Y, X);
                    v /= count;
                } else {
                    v = pool_cell(img, j % img.channels, Y, X);
                }
                out[(j * kGrid + Y) * kGrid + X] = v;
            }
    }
    out[kCanon] = 1.0;  // bias keeps all-black images embeddable
    return out;
}

void put_bytes(std::ofstream& f, const void* p, std::size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u32(std::ofstream& f, std::uint32_t v) { put_bytes(f, &v, 4); }
void put_u64(std::ofstream& f, std::uint64_t v) { put_bytes(f, &v, 8); }

void get_bytes(std::ifstream& f, void* p, std::size_t n, const char* what) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    expect(f.gcount() == static_cast<std::streamsize>(n),
           std::string("embeddings file: truncated ") + what);
}

}  // namespace

ToyEmbedder::ToyEmbedder(std::uint64_t seed, int d) : d_(d) {
    require(d >= 1, "ToyEmbedder: dimension must be positive");
    proj_.resize(d, kCanon + 1);
    Rng rng(mix64(seed, 0x746f79));
    for (int i = 0; i < d; ++i)
        for (int j = 0; j <= kCanon; ++j) proj_(i, j) = rng.normal();
}

Eigen::VectorXd ToyEmbedder::embed(const Image& img) const {
    Eigen::VectorXd v = proj_ * canonicalize(img);
    double n = v.norm();
    expect(n > 1e-12, "ToyEmbedder: degenerate projection");
    return v / n;
}

ViewClasses classify_views(const camera::ViewRig& rig) {
    require(static_cast<int>(rig.size()) == kProtocolViewCount,
            "classify_views: protocol requires exactly 120 views");
    const int n = kProtocolViewCount;
    const double step = 2.0 * M_PI / n;
    double a0 = camera::view_azimuth(rig.views[0]);
    std::vector<bool> seen_k(n, false), seen_m(n, false);
    std::vector<int> sector(n);
    for (int i = 0; i < n; ++i) {
        double a = camera::view_azimuth(rig.views[i]);
        double rel = wrap_2pi(a - a0) / step;
        long k = std::lround(rel);
        require(std::abs(rel - k) < 1e-6,
                "classify_views: azimuths are not uniformly spaced");
        if (k == n) k = 0;
        require(!seen_k[k], "classify_views: duplicate azimuth");
        seen_k[k] = true;
        long m = std::lround(wrap_2pi(a) / step) % n;
        expect(!seen_m[m], "classify_views: ambiguous sector snap");
        seen_m[m] = true;
        sector[i] = static_cast<int>(m);
    }
    ViewClasses out;
    for (int i = 0; i < n; ++i) {
        int m = sector[i];
        if (m < 20 || m >= 100)
            out.front.push_back(i);
        else if (m >= 40 && m < 80)
            out.back.push_back(i);
        else
            out.side.push_back(i);
    }
    expect(out.front.size() == 40 && out.back.size() == 40 && out.side.size() == 40,
           "classify_views: partition must be 40/40/40");
    return out;
}

double dino_sim(const Image& g_f, const Image& g_b, const std::vector<Image>& edited,
                const ViewClasses& classes, const EmbeddingProvider& provider) {
    std::size_t used = classes.front.size() + classes.back.size();
    require(used > 0, "dino_sim: no front or back views");
    Eigen::VectorXd ef = provider.embed(g_f);
    Eigen::VectorXd eb = provider.embed(g_b);
    double sum = 0.0;
    for (int i : classes.front) {
        require(i >= 0 && i < static_cast<int>(edited.size()),
                "dino_sim: view index out of range");
        sum += ef.dot(provider.embed(edited[i]));
    }
    for (int i : classes.back) {
        require(i >= 0 && i < static_cast<int>(edited.size()),
                "dino_sim: view index out of range");
        sum += eb.dot(provider.embed(edited[i]));
    }
    return sum / static_cast<double>(used);
}

double clip_cons(const std::vector<Image>& edited, const std::vector<Image>& original,
                 const EmbeddingProvider& provider) {
    require(edited.size() == original.size(), "clip_cons: view count mismatch");
    require(edited.size() >= 2, "clip_cons: need at least two views");
    std::size_t n = edited.size();
    std::vector<Eigen::VectorXd> diff(n);
    for (std::size_t i = 0; i < n; ++i)
        diff[i] = provider.embed(edited[i]) - provider.embed(original[i]);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += diff[i].dot(diff[(i + 1) % n]);
    return sum / static_cast<double>(n);
}

ImageDigest image_digest(const Image& img) {
    std::uint32_t dims[3] = {static_cast<std::uint32_t>(img.channels),
                             static_cast<std::uint32_t>(img.height),
                             static_cast<std::uint32_t>(img.width)};
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    expect(ctx != nullptr, "image_digest: EVP context allocation failed");
    ImageDigest out{};
    unsigned int len = 0;
    int ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) &&
             EVP_DigestUpdate(ctx, dims, sizeof dims) &&
             EVP_DigestUpdate(ctx, img.data.data(), img.data.size() * sizeof(double)) &&
             EVP_DigestFinal_ex(ctx, out.data(), &len);
    EVP_MD_CTX_free(ctx);
    expect(ok == 1 && len == out.size(), "image_digest: SHA-256 failure");
    return out;
}

TableEmbedder::TableEmbedder(int d) : d_(d) {
    require(d >= 1, "TableEmbedder: dimension must be positive");
}

void TableEmbedder::add(const Image& img, const Eigen::VectorXd& v) {
    require(v.size() == d_, "TableEmbedder: wrong embedding dimension");
    require(std::abs(v.norm() - 1.0) <= 1e-9, "TableEmbedder: embedding is not unit length");
    entries_[image_digest(img)] = v;
}

void TableEmbedder::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    expect(f.good(), "embeddings file: cannot open for writing: " + path);
    f.write("EMBD", 4);
    put_u32(f, 1);
    put_u32(f, static_cast<std::uint32_t>(d_));
    put_u64(f, entries_.size());
    for (const auto& [digest, vec] : entries_) {
        put_bytes(f, digest.data(), digest.size());
        put_bytes(f, vec.data(), static_cast<std::size_t>(d_) * sizeof(double));
    }
    expect(f.good(), "embeddings file: write failure: " + path);
}

Eigen::VectorXd TableEmbedder::embed(const Image& img) const {
    auto it = entries_.find(image_digest(img));
    expect(it != entries_.end(), "embedding table: unknown image");
    return it->second;
}

TableEmbedder load_embeddings(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "embeddings file: cannot open: " + path);
    char magic[4];
    get_bytes(f, magic, 4, "magic");
    expect(std::memcmp(magic, "EMBD", 4) == 0, "embeddings file: bad magic");
    std::uint32_t version, d;
    get_bytes(f, &version, 4, "version");
    expect(version == 1, "embeddings file: unsupported version");
    get_bytes(f, &d, 4, "dimension");
    expect(d >= 1 && d <= (1u << 20), "embeddings file: bad dimension");
    std::uint64_t count;
    get_bytes(f, &count, 8, "count");
    TableEmbedder table(static_cast<int>(d));
    for (std::uint64_t i = 0; i < count; ++i) {
        ImageDigest digest;
        get_bytes(f, digest.data(), digest.size(), "entry hash");
        Eigen::VectorXd v(d);
        get_bytes(f, v.data(), static_cast<std::size_t>(d) * sizeof(double), "entry vector");
        expect(std::abs(v.norm() - 1.0) <= 1e-9,
               "embeddings file: stored vector is not unit length");
        table.add_raw(digest, v);
    }
    return table;
}

void TableEmbedder::add_raw(const ImageDigest& digest, const Eigen::VectorXd& v) {
    entries_[digest] = v;
}

}  // namespace mvtk::metrics
