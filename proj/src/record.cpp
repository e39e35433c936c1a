#include <json.hpp>

#include "neas/archspace.hpp"
#include "neas/errors.hpp"

namespace neas {

namespace {

using ordered_json = nlohmann::ordered_json;

std::size_t key_position(std::string_view text, std::string_view key) {
  const std::string quoted = "\"" + std::string(key) + "\"";
  const auto pos = text.find(quoted);
  return pos == std::string_view::npos ? 0 : pos;
}

const ordered_json& field(const ordered_json& doc, std::string_view text,
                          const char* key) {
  auto it = doc.find(key);
  if (it == doc.end()) {
    throw ParseError(std::string("architecture record missing field '") + key +
                         "'",
                     text.size());
  }
  return *it;
}

int as_int(const ordered_json& v, std::string_view text, const char* key) {
  if (!v.is_number_integer()) {
    throw ParseError(std::string("field '") + key + "' must be an integer",
                     key_position(text, key));
  }
  return v.get<int>();
}

}  // namespace

std::string serialize_architecture(const EnsembleArchitecture& arch) {
  ordered_json doc;
  doc["version"] = kRecordVersion;
  doc["k"] = arch.k;
  doc["split_point"] = arch.split_point;
  doc["shared_ops"] = arch.shared_ops;
  ordered_json combos = ordered_json::array();
  for (const auto& c : arch.split_combos) combos.push_back(c.ops());
  doc["split_combos"] = std::move(combos);
  return doc.dump();
}

EnsembleArchitecture parse_architecture(std::string_view text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed architecture record: ") + e.what(),
                     e.byte);
  }
  if (!doc.is_object()) throw ParseError("architecture record must be an object", 0);
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    static const char* known[] = {"version", "k", "split_point", "shared_ops",
                                  "split_combos"};
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) {
      throw ParseError("unknown field '" + it.key() + "'",
                       key_position(text, it.key()));
    }
  }
  const int version = as_int(field(doc, text, "version"), text, "version");
  if (version != kRecordVersion) {
    throw ParseError("unsupported record version " + std::to_string(version),
                     key_position(text, "version"));
  }
  EnsembleArchitecture arch;
  arch.k = as_int(field(doc, text, "k"), text, "k");
  arch.split_point = as_int(field(doc, text, "split_point"), text, "split_point");
  if (arch.k < 1) throw ParseError("k must be >= 1", key_position(text, "k"));
  if (arch.split_point < 1) {
    throw ParseError("split_point must be >= 1", key_position(text, "split_point"));
  }
  const auto& shared = field(doc, text, "shared_ops");
  if (!shared.is_array()) {
    throw ParseError("shared_ops must be an array", key_position(text, "shared_ops"));
  }
  for (const auto& v : shared) arch.shared_ops.push_back(as_int(v, text, "shared_ops"));
  if (static_cast<int>(arch.shared_ops.size()) != arch.split_point) {
    throw ParseError("shared_ops length differs from split_point",
                     key_position(text, "shared_ops"));
  }
  const auto& combos = field(doc, text, "split_combos");
  if (!combos.is_array()) {
    throw ParseError("split_combos must be an array",
                     key_position(text, "split_combos"));
  }
  for (const auto& c : combos) {
    if (!c.is_array() || static_cast<int>(c.size()) != arch.k) {
      throw ParseError("each combination must be an array of k op ids",
                       key_position(text, "split_combos"));
    }
    std::vector<int> ops;
    for (const auto& v : c) ops.push_back(as_int(v, text, "split_combos"));
    if (!std::is_sorted(ops.begin(), ops.end())) {
      throw ParseError("combinations must be sorted",
                       key_position(text, "split_combos"));
    }
    auto combo = Combination::multiset(std::move(ops));
    if (!combo.distinct()) arch.searchable = false;
    arch.split_combos.push_back(std::move(combo));
  }
  return arch;
}

EnsembleArchitecture parse_architecture(std::string_view text,
                                        const SearchSpaceState& space) {
  auto arch = parse_architecture(text);
  try {
    space.validate(arch);
  } catch (const InvariantError& e) {
    throw ParseError(std::string("architecture outside search space: ") + e.what(),
                     key_position(text, "split_point"));
  }
  return arch;
}

}  // namespace neas
