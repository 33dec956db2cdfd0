#include "promptpar/image.hpp"

#include "promptpar/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <filesystem>

namespace promptpar {

Image read_image(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("image not found: " + path);
  cv::Mat mat = cv::imread(path, cv::IMREAD_COLOR);
  if (mat.empty()) throw DataError("unreadable image: " + path);
  Image img(mat.cols, mat.rows, 3);
  for (int y = 0; y < mat.rows; ++y) {
    const auto* row = mat.ptr<cv::Vec3b>(y);
    for (int x = 0; x < mat.cols; ++x) {
      // OpenCV stores BGR
      img.at(y, x, 0) = row[x][2];
      img.at(y, x, 1) = row[x][1];
      img.at(y, x, 2) = row[x][0];
    }
  }
  return img;
}

void write_image(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("write_image: unsupported channel count " + std::to_string(image.channels));
  }
  cv::Mat mat(image.height, image.width, image.channels == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      if (image.channels == 3) {
        mat.at<cv::Vec3b>(y, x) = cv::Vec3b(image.at(y, x, 2), image.at(y, x, 1), image.at(y, x, 0));
      } else {
        mat.at<std::uint8_t>(y, x) = image.at(y, x, 0);
      }
    }
  }
  if (!cv::imwrite(path, mat)) throw DataError("cannot write image: " + path);
}

}  // namespace promptpar
