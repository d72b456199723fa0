#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mtp {

/// Tasks a model head or a dataset can serve.
enum class Task { ReId, Attributes, Pose, Segmentation };

std::string_view to_string(Task t);
Task task_from_string(std::string_view s);
inline constexpr Task kAllTasks[] = {Task::ReId, Task::Attributes, Task::Pose, Task::Segmentation};

struct Joint {
  double x = 0.0;
  double y = 0.0;
  bool visible = false;
};

/// Joints of one person in input-pixel coordinates (origin top-left, y down).
struct JointSet {
  std::vector<Joint> joints;
  double head_size = 0.0;

  std::size_t size() const noexcept { return joints.size(); }
};

struct Attribute {
  std::string name;
  int classes = 2;
};

/// Ordered attribute list; names unique, every attribute has >= 2 classes.
struct AttributeSchema {
  std::vector<Attribute> attributes;

  std::size_t size() const noexcept { return attributes.size(); }
  bool empty() const noexcept { return attributes.empty(); }
  void validate() const;
  bool operator==(const AttributeSchema&) const = default;
};

bool operator==(const Attribute& a, const Attribute& b);

/// The ten Market-1501 style attributes with their class counts.
AttributeSchema market_attribute_schema();

/// Single-channel label image, row-major.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}
  std::uint8_t& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
  bool operator==(const Mask&) const = default;
};

inline constexpr std::uint8_t kIgnoreLabel = 255;
inline constexpr int kMissingLabel = -1;

}  // namespace mtp
