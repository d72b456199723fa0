#pragma once

#include <string>
#include <vector>

namespace mtp::tools {

struct Point {
  double x = 0.0;
  double y = 0.0;
  int n = 1;  ///< runs averaged into this point
};

struct Series {
  std::string label;
  std::vector<Point> points;  ///< sorted by x
};

/// Line chart with axes, ticks and a legend.
std::string render_svg(const std::vector<Series>& series, const std::string& x_label, const std::string& y_label);

/// "series,x,y,n" rows.
std::string render_csv(const std::vector<Series>& series);

}  // namespace mtp::tools
