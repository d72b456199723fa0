#include "mtperson/types.hpp"

#include <set>

#include "mtperson/errors.hpp"

namespace mtp {

std::string_view to_string(Task t) {
  switch (t) {
    case Task::ReId: return "reid";
    case Task::Attributes: return "attributes";
    case Task::Pose: return "pose";
    case Task::Segmentation: return "segmentation";
  }
  return "?";
}

Task task_from_string(std::string_view s) {
  if (s == "reid") return Task::ReId;
  if (s == "attributes" || s == "attr") return Task::Attributes;
  if (s == "pose") return Task::Pose;
  if (s == "segmentation" || s == "seg") return Task::Segmentation;
  throw TaskError("unknown task '" + std::string(s) + "'");
}

bool operator==(const Attribute& a, const Attribute& b) {
  return a.name == b.name && a.classes == b.classes;
}

void AttributeSchema::validate() const {
  std::set<std::string> seen;
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    const auto& a = attributes[i];
    if (a.name.empty()) throw ConfigError("attributes[" + std::to_string(i) + "].name", "empty name");
    if (a.classes < 2)
      throw ConfigError("attributes[" + std::to_string(i) + "].classes", "needs at least 2 classes");
    if (!seen.insert(a.name).second)
      throw ConfigError("attributes[" + std::to_string(i) + "].name", "duplicate name '" + a.name + "'");
  }
}

AttributeSchema market_attribute_schema() {
  return {{{"gender", 2},
           {"age", 4},
           {"hair", 2},
           {"l.slv", 2},
           {"l.low", 2},
           {"s.clth", 2},
           {"b.pack", 2},
           {"h.bag", 2},
           {"bag", 2},
           {"hat", 2}}};
}

}  // namespace mtp
