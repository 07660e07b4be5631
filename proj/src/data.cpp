#include "tgcrn/data.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

#include "binary_io.hpp"
#include "tgcrn/errors.hpp"

namespace tgcrn {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("missing file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

DayKind day_kind_from_string(const std::string& s) {
  if (s == "weekday") return DayKind::kWeekday;
  if (s == "weekend") return DayKind::kWeekend;
  throw LoadError("unknown day kind '" + s + "'");
}

DayKind calendar_day_kind(const Timestamp& ts) {
  return ts.weekday() >= 5 ? DayKind::kWeekend : DayKind::kWeekday;
}

template <typename T>
T required(const json& j, const char* key) {
  if (!j.contains(key)) throw LoadError(std::string("metadata.json missing key '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw LoadError(std::string("metadata.json key '") + key + "' has the wrong type");
  }
}

// First slot of the dataset, derived from the start timestamp.
std::size_t start_slot(const DatasetMetadata& meta) {
  const Timestamp ts = Timestamp::parse(meta.start);
  return discretize_time(ts.minute_of_day, meta.service_day()).slot;
}

}  // namespace

const char* to_string(DayKind kind) {
  return kind == DayKind::kWeekend ? "weekend" : "weekday";
}

// ---------------------------------------------------------------------------
// Timestamp

Timestamp Timestamp::parse(const std::string& iso) {
  int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
  char tail = 0;
  const int fields = std::sscanf(iso.c_str(), "%4d-%2d-%2d%*1[T ]%2d:%2d:%2d%c", &y, &mo, &d, &h,
                                 &mi, &sec, &tail);
  if (fields < 5 || fields > 6 || h > 23 || mi > 59 || sec != 0) {
    throw OutOfRangeError("invalid ISO-8601 timestamp '" + iso + "'");
  }
  using namespace std::chrono;
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) throw OutOfRangeError("invalid calendar date in '" + iso + "'");
  return Timestamp{static_cast<int>(sys_days{ymd}.time_since_epoch().count()), h * 60 + mi};
}

std::string Timestamp::to_iso() const {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{days_since_epoch}}};
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:%02d", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                minute_of_day / 60, minute_of_day % 60);
  return buf;
}

int Timestamp::weekday() const {
  using namespace std::chrono;
  return static_cast<int>(std::chrono::weekday{sys_days{days{days_since_epoch}}}.iso_encoding()) -
         1;
}

// ---------------------------------------------------------------------------
// Dataset

void Dataset::validate() const {
  const auto& m = meta;
  if (m.num_nodes == 0 || m.length == 0 || m.channels == 0 || m.slots_per_day == 0) {
    throw LoadError("metadata dimensions must be positive");
  }
  if (m.interval_minutes <= 0 ||
      m.day_start_minutes + static_cast<long>(m.slots_per_day) * m.interval_minutes > 1440) {
    throw LoadError("service day of " + std::to_string(m.slots_per_day) + " slots x " +
                    std::to_string(m.interval_minutes) + " min from minute " +
                    std::to_string(m.day_start_minutes) + " exceeds one day");
  }
  const numerics::Shape expected{m.length, m.num_nodes, m.channels};
  if (values.shape() != expected) {
    throw LoadError("values shape " + numerics::shape_to_string(values.shape()) +
                    " does not match metadata " + numerics::shape_to_string(expected));
  }
  if (slots.size() != m.length || day_kind.size() != m.length) {
    throw LoadError("slot/day-kind sequences must have length " + std::to_string(m.length));
  }
  for (std::size_t r = 0; r < slots.size(); ++r) {
    if (slots[r].slot >= m.slots_per_day) {
      throw LoadError("slot " + std::to_string(slots[r].slot) + " at row " + std::to_string(r) +
                      " exceeds slots per day");
    }
    if (r > 0 && slots[r].slot != (slots[r - 1].slot + 1) % m.slots_per_day) {
      throw LoadError("slot discontinuity at row " + std::to_string(r) + ": " +
                      std::to_string(slots[r - 1].slot) + " -> " + std::to_string(slots[r].slot));
    }
  }
}

Timestamp Dataset::timestamp_of(std::size_t row) const {
  const Timestamp start = Timestamp::parse(meta.start);
  const std::size_t first = start_slot(meta);
  const std::size_t k = first + row;
  const int day_offset = static_cast<int>(k / meta.slots_per_day);
  const int slot = static_cast<int>(k % meta.slots_per_day);
  return Timestamp{start.days_since_epoch + day_offset,
                   meta.day_start_minutes + slot * meta.interval_minutes};
}

std::size_t Dataset::row_at(const Timestamp& ts) const {
  const Timestamp start = Timestamp::parse(meta.start);
  const long first = static_cast<long>(start_slot(meta));
  const long slot = static_cast<long>(discretize_time(ts.minute_of_day, meta.service_day()).slot);
  if ((ts.minute_of_day - meta.day_start_minutes) % meta.interval_minutes != 0) {
    throw OutOfRangeError("timestamp " + ts.to_iso() + " is not on a slot boundary");
  }
  const long day_offset = ts.days_since_epoch - start.days_since_epoch;
  const long row = day_offset * static_cast<long>(meta.slots_per_day) + slot - first;
  if (row < 0 || row >= static_cast<long>(meta.length)) {
    throw OutOfRangeError("timestamp " + ts.to_iso() + " is outside the dataset (" +
                          timestamp_of(0).to_iso() + " .. " +
                          timestamp_of(meta.length - 1).to_iso() + ")");
  }
  return static_cast<std::size_t>(row);
}

Dataset load_dataset(const fs::path& dir) {
  const std::string meta_text = read_file(dir / "metadata.json");
  json j;
  try {
    j = json::parse(meta_text);
  } catch (const json::exception& e) {
    throw LoadError("metadata.json is not valid JSON: " + std::string(e.what()));
  }
  Dataset ds;
  DatasetMetadata& m = ds.meta;
  m.name = required<std::string>(j, "name");
  m.num_nodes = required<std::size_t>(j, "N");
  m.length = required<std::size_t>(j, "L");
  m.channels = required<std::size_t>(j, "d");
  m.interval_minutes = required<int>(j, "interval_minutes");
  m.slots_per_day = required<std::size_t>(j, "slots_per_day");
  m.day_start_minutes = required<int>(j, "day_start_minutes");
  m.start = required<std::string>(j, "start");

  const std::string raw = read_file(dir / "values.bin");
  const std::size_t expected = m.length * m.num_nodes * m.channels;
  if (raw.size() != expected * sizeof(double)) {
    throw LoadError("values.bin holds " + std::to_string(raw.size()) + " bytes, shape [" +
                    std::to_string(m.length) + "," + std::to_string(m.num_nodes) + "," +
                    std::to_string(m.channels) + "] needs " +
                    std::to_string(expected * sizeof(double)));
  }
  if (expected == 0) throw LoadError("metadata dimensions must be positive");
  ds.values = Tensor({m.length, m.num_nodes, m.channels});
  io::Reader reader(raw);
  reader.f64s(ds.values.data());

  // Slots: explicit list when present, otherwise consecutive from the start time.
  const std::size_t first = start_slot(m);
  if (j.contains("slots")) {
    for (const auto& s : j.at("slots")) ds.slots.emplace_back(s.get<std::size_t>());
    if (!ds.slots.empty() && ds.slots[0].slot != first) {
      throw LoadError("first slot " + std::to_string(ds.slots[0].slot) +
                      " disagrees with start time " + m.start);
    }
  } else {
    for (std::size_t r = 0; r < m.length; ++r) ds.slots.emplace_back((first + r) % m.slots_per_day);
  }

  if (j.contains("day_kind")) {
    for (const auto& k : j.at("day_kind")) ds.day_kind.push_back(day_kind_from_string(k));
  } else {
    // Calendar rule: Saturday and Sunday are weekend days.
    for (std::size_t r = 0; r < m.length; ++r) {
      ds.day_kind.push_back(calendar_day_kind(ds.timestamp_of(r)));
    }
  }
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
  json j;
  j["name"] = ds.meta.name;
  j["N"] = ds.meta.num_nodes;
  j["L"] = ds.meta.length;
  j["d"] = ds.meta.channels;
  j["interval_minutes"] = ds.meta.interval_minutes;
  j["slots_per_day"] = ds.meta.slots_per_day;
  j["day_start_minutes"] = ds.meta.day_start_minutes;
  j["start"] = ds.meta.start;
  json kinds = json::array();
  for (auto k : ds.day_kind) kinds.push_back(to_string(k));
  j["day_kind"] = std::move(kinds);
  write_file(dir / "metadata.json", j.dump(2) + "\n");

  std::string bytes;
  bytes.reserve(ds.values.size() * sizeof(double));
  io::put_f64s(bytes, ds.values.data());
  write_file(dir / "values.bin", bytes);
}

// ---------------------------------------------------------------------------
// Synthetic generator

Tensor PlantedTruth::at(std::size_t row) const {
  const std::size_t n = base_weekday.shape()[0];
  Tensor out({n, n});
  std::copy_n(&adjacency.data()[row * n * n], n * n, out.data().data());
  return out;
}

Tensor PlantedTruth::row_normalized_at(std::size_t row) const {
  Tensor a = at(row);
  const std::size_t n = a.shape()[0];
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a(i, j);
    if (s > 0) {
      for (std::size_t j = 0; j < n; ++j) a(i, j) /= s;
    }
  }
  return a;
}

std::pair<Dataset, PlantedTruth> generate_synthetic(const SynthConfig& cfg) {
  if (cfg.num_nodes < 2) throw ConfigError("synthetic data needs at least 2 nodes");
  if (cfg.days < 7) throw ConfigError("synthetic data needs at least 7 days, got " +
                                      std::to_string(cfg.days));
  if (cfg.slots_per_day < 2 || 1440 % cfg.slots_per_day != 0) {
    throw ConfigError("slots per day must be at least 2 and divide 1440, got " +
                      std::to_string(cfg.slots_per_day));
  }
  if (!(cfg.noise_std >= 0)) throw ConfigError("noise std must be non-negative");

  const std::size_t n = cfg.num_nodes;
  const std::size_t spd = cfg.slots_per_day;
  const std::size_t length = cfg.days * spd;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Sparse-ish symmetric weights: most pairs weak, a few strong.
  auto random_base = [&]() {
    Tensor b({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i; j < n; ++j) {
        const double u = unit(rng);
        b(i, j) = b(j, i) = u * u * u * u;
      }
    }
    return b;
  };

  PlantedTruth truth;
  truth.base_weekday = random_base();
  truth.base_weekend = random_base();

  // Morning and evening peaks on a 0.2 baseline.
  truth.intraday_profile.resize(spd);
  for (std::size_t s = 0; s < spd; ++s) {
    const double hour = 24.0 * static_cast<double>(s) / static_cast<double>(spd);
    auto bump = [hour](double centre) {
      return std::exp(-(hour - centre) * (hour - centre) / (2.0 * 1.5 * 1.5));
    };
    truth.intraday_profile[s] = 0.2 + bump(8.0) + bump(18.0);
  }
  std::vector<double> amplitude(n);
  for (auto& a : amplitude) {
    const double u = unit(rng);
    a = u * u;
  }

  Dataset ds;
  ds.meta = DatasetMetadata{"synthetic", n, length, 1, static_cast<int>(1440 / spd), spd, 0,
                            "2024-01-01T00:00"};
  ds.values = Tensor({length, n, 1});
  truth.adjacency = Tensor({length, n, n});

  // 2024-01-01 is a Monday: a 7-day cycle with days 5 and 6 as weekend.
  for (std::size_t r = 0; r < length; ++r) {
    ds.slots.emplace_back(r % spd);
    ds.day_kind.push_back((r / spd) % 7 >= 5 ? DayKind::kWeekend : DayKind::kWeekday);
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> x(n), next(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amplitude[i];
  for (std::size_t r = 0; r < length; ++r) {
    const std::size_t slot = ds.slots[r].slot;
    const double profile = truth.intraday_profile[slot];
    const Tensor& base =
        ds.day_kind[r] == DayKind::kWeekend ? truth.base_weekend : truth.base_weekday;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        truth.adjacency[(r * n + i) * n + j] = base(i, j) * profile;
      }
      ds.values[r * n + i] = x[i];
    }
    // x_{t+1} = retention · rownorm(A*(t)) · x_t + amplitude · profile(slot) + noise
    for (std::size_t i = 0; i < n; ++i) {
      double row_total = 0.0, mixed = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        row_total += base(i, j);
        mixed += base(i, j) * x[j];
      }
      const double seasonal = amplitude[i] * profile;
      const double value = kSynthRetention * (row_total > 0 ? mixed / row_total : x[i]) + seasonal +
                           cfg.noise_std * noise(rng);
      next[i] = std::max(0.0, value);
    }
    x.swap(next);
  }
  return {std::move(ds), std::move(truth)};
}

void save_truth(const PlantedTruth& truth, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  std::string bytes;
  io::put_f64s(bytes, truth.adjacency.data());
  write_file(dir / "truth.bin", bytes);
}

Tensor load_truth(const fs::path& dir, const DatasetMetadata& meta) {
  const std::string raw = read_file(dir / "truth.bin");
  const std::size_t count = meta.length * meta.num_nodes * meta.num_nodes;
  if (raw.size() != count * sizeof(double)) {
    throw LoadError("truth.bin holds " + std::to_string(raw.size()) + " bytes, expected " +
                    std::to_string(count * sizeof(double)));
  }
  Tensor out({meta.length, meta.num_nodes, meta.num_nodes});
  io::Reader(raw).f64s(out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Windows

std::size_t window_count(std::size_t length, std::size_t history, std::size_t horizon) {
  return length >= history + horizon ? length - history - horizon + 1 : 0;
}

Splits make_windows(const Dataset& ds, std::size_t history, std::size_t horizon,
                    SplitFractions fractions) {
  if (history == 0 || horizon == 0) throw ConfigError("history and horizon must be positive");
  if (fractions.train <= 0 || fractions.val < 0 || fractions.test < 0 ||
      std::abs(fractions.train + fractions.val + fractions.test - 1.0) > 1e-9) {
    throw ConfigError("split fractions must be non-negative, train positive, and sum to 1");
  }
  const std::size_t length = ds.meta.length;
  const std::size_t span = history + horizon;
  if (span > length) {
    throw ConfigError("dataset of " + std::to_string(length) + " rows is shorter than P+Q=" +
                      std::to_string(span));
  }
  Splits out;
  out.train_end = static_cast<std::size_t>(std::llround(fractions.train * length));
  out.val_end = static_cast<std::size_t>(std::llround((fractions.train + fractions.val) * length));
  out.val_end = std::min(out.val_end, length);

  auto fill = [span](std::vector<std::size_t>& dst, std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s + span <= end; ++s) dst.push_back(s);
  };
  fill(out.train, 0, out.train_end);
  fill(out.val, out.train_end, out.val_end);
  fill(out.test, out.val_end, length);

  auto check = [](const std::vector<std::size_t>& v, double frac, const char* name) {
    if (frac > 0 && v.empty()) {
      throw ConfigError(std::string("dataset too short: ") + name +
                        " split has no complete window");
    }
  };
  check(out.train, fractions.train, "train");
  check(out.val, fractions.val, "val");
  check(out.test, fractions.test, "test");
  return out;
}

// ---------------------------------------------------------------------------
// Normalizer

Normalizer Normalizer::fit(const Dataset& ds, std::size_t begin, std::size_t end) {
  if (begin >= end || end > ds.meta.length) {
    throw ContractError("normalizer needs a non-empty row range inside the dataset");
  }
  std::vector<std::size_t> starts(end - begin);
  for (std::size_t r = begin; r < end; ++r) starts[r - begin] = r;
  return fit_windows(ds, starts, 1);
}

Normalizer Normalizer::fit_windows(const Dataset& ds, std::span<const std::size_t> starts,
                                   std::size_t window_length) {
  if (starts.empty()) throw ContractError("normalizer needs at least one training window");
  const std::size_t n = ds.meta.num_nodes, d = ds.meta.channels;
  std::vector<char> covered(ds.meta.length, 0);
  for (auto s : starts) {
    for (std::size_t r = s; r < s + window_length && r < ds.meta.length; ++r) covered[r] = 1;
  }
  Normalizer norm;
  norm.mean.assign(d, 0.0);
  norm.std.assign(d, 0.0);
  double count = 0.0;
  for (std::size_t r = 0; r < ds.meta.length; ++r) {
    if (!covered[r]) continue;
    count += static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) norm.mean[c] += ds.values[(r * n + i) * d + c];
    }
  }
  for (auto& m : norm.mean) m /= count;
  for (std::size_t r = 0; r < ds.meta.length; ++r) {
    if (!covered[r]) continue;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < d; ++c) {
        const double dev = ds.values[(r * n + i) * d + c] - norm.mean[c];
        norm.std[c] += dev * dev;
      }
    }
  }
  for (auto& s : norm.std) s = std::max(std::sqrt(s / count), kMinStd);
  return norm;
}

Tensor Normalizer::normalize(const Tensor& t) const {
  const std::size_t d = mean.size();
  if (t.rank() == 0 || t.shape().back() != d) {
    throw DimensionError("normalize: trailing axis of " + numerics::shape_to_string(t.shape()) +
                         " is not " + std::to_string(d) + " channels");
  }
  Tensor out(t.shape());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = (t[k] - mean[k % d]) / std[k % d];
  return out;
}

Tensor Normalizer::denormalize(const Tensor& t) const {
  const std::size_t d = mean.size();
  if (t.rank() == 0 || t.shape().back() != d) {
    throw DimensionError("denormalize: trailing axis of " + numerics::shape_to_string(t.shape()) +
                         " is not " + std::to_string(d) + " channels");
  }
  Tensor out(t.shape());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = t[k] * std[k % d] + mean[k % d];
  return out;
}

WindowBatch make_batch(const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts, std::size_t history,
                       std::size_t horizon) {
  if (starts.empty()) throw ContractError("empty batch");
  const std::size_t n = ds.meta.num_nodes, d = ds.meta.channels;
  const std::size_t b = starts.size();
  const std::size_t row = n * d;
  WindowBatch batch;
  batch.inputs = Tensor({b, history, n, d});
  batch.targets = Tensor({b, horizon, n, d});
  batch.starts.assign(starts.begin(), starts.end());
  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t s = starts[k];
    if (s + history + horizon > ds.meta.length) {
      throw OutOfRangeError("window starting at row " + std::to_string(s) +
                            " runs past the dataset end");
    }
    for (std::size_t p = 0; p < history; ++p) {
      for (std::size_t e = 0; e < row; ++e) {
        const double v = ds.values[(s + p) * row + e];
        batch.inputs[(k * history + p) * row + e] = (v - norm.mean[e % d]) / norm.std[e % d];
      }
    }
    for (std::size_t q = 0; q < horizon; ++q) {
      std::copy_n(&ds.values.data()[(s + history + q) * row], row,
                  &batch.targets.data()[(k * horizon + q) * row]);
    }
    std::vector<TimeIndex> slots(ds.slots.begin() + static_cast<std::ptrdiff_t>(s),
                                 ds.slots.begin() + static_cast<std::ptrdiff_t>(s + history + horizon));
    batch.slots.push_back(std::move(slots));
  }
  return batch;
}

Normalizer Normalizer::leading(std::size_t k) const {
  if (k > mean.size()) throw DimensionError("normalizer has fewer channels than requested");
  return Normalizer{std::vector<double>(mean.begin(), mean.begin() + static_cast<std::ptrdiff_t>(k)),
                    std::vector<double>(std.begin(), std.begin() + static_cast<std::ptrdiff_t>(k))};
}

}  // namespace tgcrn
