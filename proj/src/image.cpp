#include "image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "errors.hpp"

namespace mvtk {

double image_mse(const Image& a, const Image& b) {
    require(a.same_shape(b), "image_mse: shape mismatch");
    require(!a.data.empty(), "image_mse: empty image");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = a.data[i] - b.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.data.size());
}

Image quantize8(const Image& img) {
    Image out = img;
    for (double& v : out.data) {
        double c = std::clamp(v, 0.0, 1.0);
        v = std::round(c * 255.0) / 255.0;
    }
    return out;
}

Image dilate_disc(const Image& mask, int radius) {
    require(mask.channels == 1, "dilate_disc: expects single channel mask");
    require(radius >= 0, "dilate_disc: negative radius");
    Image out(1, mask.height, mask.width, 0.0);
    int r2 = radius * radius;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(0, y, x) <= 0.5) continue;
            int y0 = std::max(0, y - radius), y1 = std::min(mask.height - 1, y + radius);
            int x0 = std::max(0, x - radius), x1 = std::min(mask.width - 1, x + radius);
            for (int yy = y0; yy <= y1; ++yy)
                for (int xx = x0; xx <= x1; ++xx)
                    if ((yy - y) * (yy - y) + (xx - x) * (xx - x) <= r2)
                        out.at(0, yy, xx) = 1.0;
        }
    }
    return out;
}

void write_ppm(const std::string& path, const Image& img) {
    require(img.channels == 3, "write_ppm: expects 3 channels");
    std::ofstream f(path, std::ios::binary);
    expect(f.good(), "write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        f.write(reinterpret_cast<const char*>(row.data()), row.size());
    }
    expect(f.good(), "write_ppm: write failed for " + path);
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comment lines.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
        } else if (!std::isspace(ch)) {
            tok.push_back(static_cast<char>(ch));
            while ((ch = in.peek()) != EOF && !std::isspace(ch)) tok.push_back(static_cast<char>(in.get()));
            return tok;
        }
    }
    return tok;
}

}  // namespace

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "read_ppm: cannot open " + path);
    expect(next_token(f) == "P6", "read_ppm: bad magic in " + path);
    int w = std::stoi(next_token(f));
    int h = std::stoi(next_token(f));
    int maxv = std::stoi(next_token(f));
    expect(w > 0 && h > 0 && maxv == 255, "read_ppm: unsupported header in " + path);
    f.get();  // single whitespace after maxval
    Image img(3, h, w);
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        f.read(reinterpret_cast<char*>(row.data()), row.size());
        expect(f.good(), "read_ppm: truncated file " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
    }
    return img;
}

void write_pfm(const std::string& path, const Image& img) {
    require(img.channels == 1 || img.channels == 3, "write_pfm: 1 or 3 channels");
    std::ofstream f(path, std::ios::binary);
    expect(f.good(), "write_pfm: cannot open " + path);
    f << (img.channels == 3 ? "PF" : "Pf") << "\n"
      << img.width << " " << img.height << "\n-1.0\n";
    std::vector<float> row(static_cast<size_t>(img.width) * img.channels);
    for (int y = img.height - 1; y >= 0; --y) {  // bottom-up
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < img.channels; ++c)
                row[static_cast<size_t>(x) * img.channels + c] =
                    static_cast<float>(img.at(c, y, x));
        f.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
    }
    expect(f.good(), "write_pfm: write failed for " + path);
}

Image read_pfm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    expect(f.good(), "read_pfm: cannot open " + path);
    std::string magic = next_token(f);
    expect(magic == "PF" || magic == "Pf", "read_pfm: bad magic in " + path);
    int c = magic == "PF" ? 3 : 1;
    int w = std::stoi(next_token(f));
    int h = std::stoi(next_token(f));
    double scale = std::stod(next_token(f));
    expect(w > 0 && h > 0 && scale < 0, "read_pfm: unsupported header in " + path);
    f.get();
    Image img(c, h, w);
    std::vector<float> row(static_cast<size_t>(w) * c);
    for (int y = h - 1; y >= 0; --y) {
        f.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
        expect(f.good(), "read_pfm: truncated file " + path);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                img.at(ch, y, x) = row[static_cast<size_t>(x) * c + ch];
    }
    return img;
}

}  // namespace mvtk
