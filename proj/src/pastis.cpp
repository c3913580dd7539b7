// SPDX-License-Identifier: Apache-2.0
//
// PASTIS-R directory adapter. This is the only place with knowledge of the
// on-disk format.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>

#include "sitsdeco/ingest.hpp"
#include "sitsdeco/npy.hpp"
#include "sitsdeco/schema.hpp"

namespace sitsdeco {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string id_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return std::to_string(static_cast<long long>(v.get<double>()));
  throw ConfigError("metadata: ID_PATCH must be a string or integer");
}

// PASTIS stores dates as {"0": 20180924, "1": ...}; a plain list is also accepted.
std::vector<int> parse_dates(const json& props, const std::string& key, const std::string& id) {
  std::vector<int> days;
  if (!props.contains(key)) return days;
  const auto& v = props.at(key);
  auto as_int = [](const json& d) {
    return d.is_string() ? std::stoi(d.get<std::string>()) : static_cast<int>(d.get<double>());
  };
  if (v.is_object()) {
    std::vector<std::pair<int, int>> indexed;
    for (auto it = v.begin(); it != v.end(); ++it) indexed.emplace_back(std::stoi(it.key()), as_int(it.value()));
    std::sort(indexed.begin(), indexed.end());
    for (const auto& [i, d] : indexed) days.push_back(day_offset_from_yyyymmdd(d));
  } else if (v.is_array()) {
    for (const auto& d : v) days.push_back(day_offset_from_yyyymmdd(as_int(d)));
  } else {
    throw ConfigError("metadata: patch " + id + ": '" + key + "' must be an object or list");
  }
  for (std::size_t i = 1; i < days.size(); ++i)
    if (days[i] <= days[i - 1])
      throw ConfigError("metadata: patch " + id + ": '" + key + "' dates not strictly increasing");
  return days;
}

void collect_xy(const json& coords, double& sx, double& sy, std::size_t& n) {
  if (coords.is_array() && coords.size() >= 2 && coords[0].is_number() && coords[1].is_number()) {
    sx += coords[0].get<double>();
    sy += coords[1].get<double>();
    ++n;
    return;
  }
  if (!coords.is_array()) return;
  // A closed ring repeats its first vertex; count it once.
  std::size_t end = coords.size();
  if (end > 1 && coords[0].is_array() && coords[0].size() >= 2 && coords[0][0].is_number() &&
      coords[0] == coords[end - 1])
    --end;
  for (std::size_t i = 0; i < end; ++i) collect_xy(coords[i], sx, sy, n);
}

Array4 load_array4(const fs::path& path, std::size_t channels) {
  const auto arr = npy::read(path);
  if (arr.shape.size() != 4 || arr.shape[1] != channels)
    throw ConfigError(path.string() + ": expected T x " + std::to_string(channels) + " x H x W");
  Array4 out;
  out.t = arr.shape[0];
  out.c = arr.shape[1];
  out.h = arr.shape[2];
  out.w = arr.shape[3];
  out.data = arr.data;
  return out;
}

json dates_json(const std::vector<int>& days) {
  json o = json::object();
  for (std::size_t i = 0; i < days.size(); ++i) o[std::to_string(i)] = yyyymmdd_from_day_offset(days[i]);
  return o;
}

}  // namespace

std::array<double, 2> lambert93_to_latlon(double x, double y) {
  constexpr double kPi = 3.14159265358979323846;
  constexpr double a = 6378137.0;
  constexpr double e = 0.0818191910428158;
  constexpr double deg = kPi / 180.0;
  const double lat1 = 49.0 * deg, lat2 = 44.0 * deg, lat0 = 46.5 * deg, lon0 = 3.0 * deg;
  constexpr double x0 = 700000.0, y0 = 6600000.0;

  auto m = [&](double phi) { return std::cos(phi) / std::sqrt(1.0 - e * e * std::sin(phi) * std::sin(phi)); };
  auto t = [&](double phi) {
    const double es = e * std::sin(phi);
    return std::tan(kPi / 4.0 - phi / 2.0) / std::pow((1.0 - es) / (1.0 + es), e / 2.0);
  };
  const double n = (std::log(m(lat1)) - std::log(m(lat2))) / (std::log(t(lat1)) - std::log(t(lat2)));
  const double F = m(lat1) / (n * std::pow(t(lat1), n));
  const double rho0 = a * F * std::pow(t(lat0), n);

  const double dx = x - x0;
  const double dy = rho0 - (y - y0);
  const double rho = std::copysign(std::sqrt(dx * dx + dy * dy), n);
  const double tt = std::pow(rho / (a * F), 1.0 / n);
  const double theta = std::atan2(dx, dy);
  const double lon = theta / n + lon0;
  double phi = kPi / 2.0 - 2.0 * std::atan(tt);
  for (int i = 0; i < 20; ++i) {
    const double es = e * std::sin(phi);
    phi = kPi / 2.0 - 2.0 * std::atan(tt * std::pow((1.0 - es) / (1.0 + es), e / 2.0));
  }
  return {phi / deg, lon / deg};
}

PastisDataset::PastisDataset(fs::path root) : root_(std::move(root)) {
  const auto meta_path = root_ / "metadata.geojson";
  std::ifstream in(meta_path);
  if (!in) throw ConfigError("dataset: cannot open " + meta_path.string());
  json meta;
  try {
    in >> meta;
  } catch (const json::exception& e) {
    throw ConfigError("dataset: " + meta_path.string() + ": " + e.what());
  }
  if (!meta.contains("features") || !meta["features"].is_array())
    throw ConfigError("dataset: metadata has no feature list");

  std::set<std::string> tiles;
  for (const auto& f : meta["features"]) {
    const auto& props = f.at("properties");
    Entry e;
    e.id = id_string(props.at("ID_PATCH"));
    e.tile_name = props.value("TILE", std::string("T0"));
    e.fold = props.value("Fold", 1);
    if (e.fold < 1 || e.fold > 5) throw ConfigError("dataset: patch " + e.id + " has fold outside 1..5");
    e.s2_dates = parse_dates(props, "dates-S2", e.id);
    e.s1a_dates = parse_dates(props, "dates-S1A", e.id);
    e.s1d_dates = parse_dates(props, "dates-S1D", e.id);
    if (props.contains("lat") && props.contains("lon")) {
      e.lat = props["lat"].get<double>();
      e.lon = props["lon"].get<double>();
    } else if (f.contains("geometry") && !f["geometry"].is_null()) {
      double sx = 0.0, sy = 0.0;
      std::size_t n = 0;
      collect_xy(f["geometry"].at("coordinates"), sx, sy, n);
      if (n > 0) {
        sx /= static_cast<double>(n);
        sy /= static_cast<double>(n);
        if (std::abs(sx) > 360.0 || std::abs(sy) > 360.0) {
          const auto ll = lambert93_to_latlon(sx, sy);
          e.lat = ll[0];
          e.lon = ll[1];
        } else {
          e.lat = sy;
          e.lon = sx;
        }
      }
    }
    tiles.insert(e.tile_name);
    entries_.push_back(std::move(e));
  }
  if (entries_.empty()) throw ConfigError("dataset: no patches in " + meta_path.string());
  tile_names_.assign(tiles.begin(), tiles.end());
  for (auto& e : entries_)
    e.tile_id = static_cast<int>(std::lower_bound(tile_names_.begin(), tile_names_.end(), e.tile_name) -
                                 tile_names_.begin());
}

RawPatch PastisDataset::load(std::size_t index) const {
  const auto& e = entries_.at(index);
  RawPatch p;
  p.id = e.id;
  p.tile_id = e.tile_id;
  p.tile_name = e.tile_name;
  p.fold = e.fold;
  p.lat = e.lat;
  p.lon = e.lon;
  p.s2 = load_array4(root_ / "DATA_S2" / ("S2_" + e.id + ".npy"), kS2Bands);
  p.s1_asc = load_array4(root_ / "DATA_S1A" / ("S1A_" + e.id + ".npy"), kS1OrbitChannels);
  p.s1_desc = load_array4(root_ / "DATA_S1D" / ("S1D_" + e.id + ".npy"), kS1OrbitChannels);
  p.s2_dates = e.s2_dates;
  p.s1_asc_dates = e.s1a_dates;
  p.s1_desc_dates = e.s1d_dates;
  if (p.s2.t != p.s2_dates.size() || p.s1_asc.t != p.s1_asc_dates.size() ||
      p.s1_desc.t != p.s1_desc_dates.size())
    throw ConfigError("dataset: patch " + e.id + ": date count does not match array length");
  p.height = p.s2.h;
  p.width = p.s2.w;
  const auto target = npy::read(root_ / "ANNOTATIONS" / ("TARGET_" + e.id + ".npy"));
  const std::size_t hw = p.height * p.width;
  if (target.size() < hw) throw ConfigError("dataset: patch " + e.id + ": annotation too small");
  p.labels.resize(hw);
  for (std::size_t i = 0; i < hw; ++i) p.labels[i] = static_cast<int>(target.data[i]);
  return p;
}

void write_pastis_layout(const fs::path& root, std::span<const RawPatch> patches) {
  for (const char* sub : {"DATA_S2", "DATA_S1A", "DATA_S1D", "ANNOTATIONS"}) fs::create_directories(root / sub);
  json features = json::array();
  for (const auto& p : patches) {
    if (p.scaled) throw ConfigError("write_pastis_layout: patch " + p.id + " is scaled; write raw values");
    const std::array<std::size_t, 4> s2_shape{p.s2.t, p.s2.c, p.s2.h, p.s2.w};
    npy::write(root / "DATA_S2" / ("S2_" + p.id + ".npy"), s2_shape, p.s2.data, npy::DType::kInt16);
    const std::array<std::size_t, 4> a_shape{p.s1_asc.t, p.s1_asc.c, p.s1_asc.h, p.s1_asc.w};
    npy::write(root / "DATA_S1A" / ("S1A_" + p.id + ".npy"), a_shape, p.s1_asc.data, npy::DType::kFloat32);
    const std::array<std::size_t, 4> d_shape{p.s1_desc.t, p.s1_desc.c, p.s1_desc.h, p.s1_desc.w};
    npy::write(root / "DATA_S1D" / ("S1D_" + p.id + ".npy"), d_shape, p.s1_desc.data, npy::DType::kFloat32);
    std::vector<float> target(3 * p.height * p.width, 0.0f);
    std::transform(p.labels.begin(), p.labels.end(), target.begin(), [](int v) { return static_cast<float>(v); });
    const std::array<std::size_t, 3> t_shape{3, p.height, p.width};
    npy::write(root / "ANNOTATIONS" / ("TARGET_" + p.id + ".npy"), t_shape, target, npy::DType::kUInt8);

    const double h = 0.005;
    json ring = json::array({json::array({p.lon - h, p.lat - h}), json::array({p.lon + h, p.lat - h}),
                             json::array({p.lon + h, p.lat + h}), json::array({p.lon - h, p.lat + h}),
                             json::array({p.lon - h, p.lat - h})});
    json feature = {
        {"type", "Feature"},
        {"properties",
         {{"ID_PATCH", p.id},
          {"TILE", p.tile_name},
          {"Fold", p.fold},
          {"dates-S2", dates_json(p.s2_dates)},
          {"dates-S1A", dates_json(p.s1_asc_dates)},
          {"dates-S1D", dates_json(p.s1_desc_dates)}}},
        {"geometry", {{"type", "Polygon"}, {"coordinates", json::array({ring})}}},
    };
    features.push_back(std::move(feature));
  }
  json meta = {{"type", "FeatureCollection"}, {"features", features}};
  std::ofstream out(root / "metadata.geojson");
  if (!out) throw ConfigError("cannot write " + (root / "metadata.geojson").string());
  out << meta.dump(1) << "\n";
}

}  // namespace sitsdeco
