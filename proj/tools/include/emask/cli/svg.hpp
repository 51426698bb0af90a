#pragma once

#include <string>
#include <vector>

namespace emask::cli {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  int width = 640;
  int height = 400;
};

std::string render_svg(const LineChart& chart);

}  // namespace emask::cli
