#include "carel/harness/metrics.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "carel/errors.hpp"
#include "carel/harness/config.hpp"

namespace carel::harness {

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

double parse_double(std::string_view s, std::string_view column) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError("metrics column " + std::string(column) + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

std::uint64_t parse_u64(std::string_view s, std::string_view column) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ParseError("metrics column " + std::string(column) + ": bad integer '" + std::string(s) + "'");
  }
  return v;
}

std::optional<double> parse_optional(std::string_view s, std::string_view column) {
  if (s.empty()) return std::nullopt;
  return parse_double(s, column);
}

}  // namespace

std::string format_metrics_row(const MetricsRecord& r) {
  std::ostringstream os;
  os << r.frame << ',' << r.episodes << ',' << format_double(r.sr_train) << ',' << format_double(r.sr_holdout) << ','
     << format_double(r.rl_loss) << ',' << cell(r.aux_loss) << ',' << r.mask_events << ',' << cell(r.fps) << ','
     << cell(r.wall_seconds);
  return os.str();
}

MetricsRecord parse_metrics_row(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cols.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (cols.size() != 9) throw ParseError("metrics row has " + std::to_string(cols.size()) + " columns, expected 9");
  MetricsRecord r;
  r.frame = parse_u64(cols[0], "frame");
  r.episodes = parse_u64(cols[1], "episodes");
  r.sr_train = parse_double(cols[2], "sr_train");
  r.sr_holdout = parse_double(cols[3], "sr_holdout");
  r.rl_loss = parse_double(cols[4], "rl_loss");
  r.aux_loss = parse_optional(cols[5], "aux_loss");
  r.mask_events = parse_u64(cols[6], "mask_events");
  r.fps = parse_optional(cols[7], "fps");
  r.wall_seconds = parse_optional(cols[8], "wall_seconds");
  return r;
}

MetricsWriter::MetricsWriter(std::filesystem::path path) : path_(std::move(path)) {
  const bool fresh = !std::filesystem::exists(path_) || std::filesystem::file_size(path_) == 0;
  if (!fresh) {
    const auto existing = read_metrics(path_);
    if (!existing.empty()) last_frame_ = existing.back().frame;
    return;
  }
  std::ofstream out(path_, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics file " + path_.string());
  out << kMetricsHeader << '\n';
}

void MetricsWriter::append(const MetricsRecord& r) {
  if (last_frame_ && r.frame <= *last_frame_) {
    throw ContractError("metrics frames must strictly increase: " + std::to_string(r.frame) + " after " +
                        std::to_string(*last_frame_));
  }
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to metrics file " + path_.string());
  out << format_metrics_row(r) << '\n';
  if (!out) throw IoError("write failed for metrics file " + path_.string());
  last_frame_ = r.frame;
}

void emit_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& path) {
  if (records.empty()) throw ContractError("emit_metrics needs at least one record");
  std::filesystem::remove(path);
  MetricsWriter w(path);
  for (const auto& r : records) w.append(r);
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metrics file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw ParseError("metrics file " + path.string() + " does not start with the expected header");
  }
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_metrics_row(line));
  }
  return out;
}

}  // namespace carel::harness
