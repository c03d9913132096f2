#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace carel::harness {

inline constexpr std::string_view kMetricsHeader =
    "frame,episodes,sr_train,sr_holdout,rl_loss,aux_loss,mask_events,fps,wall_seconds";

// One evaluation window.
struct MetricsRecord {
  std::uint64_t frame = 0;
  std::uint64_t episodes = 0;
  double sr_train = 0.0;
  double sr_holdout = 0.0;
  double rl_loss = 0.0;
  std::optional<double> aux_loss;  // absent when every aux step of the window was skipped
  std::uint64_t mask_events = 0;
  std::optional<double> fps;  // absent when timing is not logged
  std::optional<double> wall_seconds;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

std::string format_metrics_row(const MetricsRecord& r);
MetricsRecord parse_metrics_row(std::string_view line);

// Appends rows to a CSV, writing the header when the file is new or empty.
// IoError when the path cannot be written; ContractError when frames do not
// strictly increase.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::filesystem::path path);
  void append(const MetricsRecord& r);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::optional<std::uint64_t> last_frame_;
};

// Writes the whole file (records must be non-empty).
void emit_metrics(const std::vector<MetricsRecord>& records, const std::filesystem::path& path);
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

}  // namespace carel::harness
