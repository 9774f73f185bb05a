#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mvtk {

// Planar channel-major raster of doubles. Display images keep values in
// [0, 1]; latents are unbounded. Pixel (x, y) has x growing right and y
// growing down, matching file row order.
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;  // size channels * height * width, plane per channel

    Image() = default;
    Image(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          data(static_cast<size_t>(c) * h * w, fill) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t size() const { return data.size(); }
    bool same_shape(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

// Mean of squared per-element differences; shapes must match.
double image_mse(const Image& a, const Image& b);

// Snap to the 8-bit grid: round(clamp(v, 0, 1) * 255) / 255 per element.
Image quantize8(const Image& img);

// Binary disc dilation with the given pixel radius; input treated as
// mask > 0.5, output is exactly 0 or 1.
Image dilate_disc(const Image& mask, int radius);

// 8-bit binary PPM (P6). Write clamps and rounds; read maps v/255 back.
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);

// Float PFM, scale -1 (little endian), rows stored bottom-up. 1 or 3 channels.
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

}  // namespace mvtk
