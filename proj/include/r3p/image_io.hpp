#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <vector>

#include "r3p/common.hpp"
#include "r3p/tensor.hpp"

namespace r3p {

// Reads any format OpenCV decodes, area-resamples to size x size and returns
// RGB values in [0,1].
inline Tensor read_image(const std::filesystem::path& path, int size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  require<IngestionError>(!bgr.empty(), "unreadable image file: ", path.string());
  if (bgr.rows != size || bgr.cols != size)
    cv::resize(bgr, bgr, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  Tensor out(3, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const auto& px = bgr.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) out(c, y, x) = px[2 - c] / 255.0;
    }
  return out;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
}

inline cv::Mat to_bgr(const Tensor& rgb) {
  require(rgb.channels == 3, "expected a 3-channel image");
  cv::Mat bgr(rgb.height, rgb.width, CV_8UC3);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x)
      for (int c = 0; c < 3; ++c) bgr.at<cv::Vec3b>(y, x)[2 - c] = to_byte(rgb(c, y, x));
  return bgr;
}

inline void write_png(const std::filesystem::path& path, const cv::Mat& image) {
  require<FormatError>(cv::imwrite(path.string(), image), "cannot write ", path.string());
}

inline std::vector<std::uint8_t> encode_png(const cv::Mat& image) {
  std::vector<std::uint8_t> bytes;
  require<FormatError>(cv::imencode(".png", image, bytes), "PNG encoding failed");
  return bytes;
}

// Jet-colored heatmap blended over the image at the given opacity.
inline cv::Mat heatmap_overlay(const Tensor& rgb, const Grid& display, double opacity = 0.5,
                               int scale = 1) {
  require(display.height == rgb.height && display.width == rgb.width,
          "heatmap and image sizes differ");
  cv::Mat base = to_bgr(rgb);
  cv::Mat gray(display.height, display.width, CV_8UC1);
  for (int y = 0; y < display.height; ++y)
    for (int x = 0; x < display.width; ++x) gray.at<std::uint8_t>(y, x) = to_byte(display(y, x));
  cv::Mat colored;
  cv::applyColorMap(gray, colored, cv::COLORMAP_JET);
  cv::Mat blended;
  cv::addWeighted(base, 1.0 - opacity, colored, opacity, 0.0, blended);
  if (scale > 1)
    cv::resize(blended, blended, cv::Size(), scale, scale, cv::INTER_NEAREST);
  return blended;
}

}  // namespace r3p
