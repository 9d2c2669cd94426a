#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "georect/dataset_io.hpp"
#include "georect/detection.hpp"
#include "georect/error.hpp"
#include "georect/rectification.hpp"
#include "georect/reference_detector.hpp"

namespace georect {

inline constexpr int kProtocolVersion = 1;

/// A detector accepting up to capacity() outstanding requests. Responses may
/// arrive in any order; ids tie them to requests.
class DetectorBackend {
 public:
  virtual ~DetectorBackend() = default;

  virtual int capacity() const = 0;
  virtual std::vector<int> classes() const = 0;
  /// Queues a request and returns its id.
  virtual std::uint64_t submit(const RgbImage& image, const Mask* mask) = 0;
  /// Blocks for the next response (tile-space detections, unclamped).
  virtual std::pair<std::uint64_t, std::vector<Detection>> receive() = 0;
  /// Drops outstanding requests after a failure so the next call starts clean.
  virtual void reset() {}
};

/// In-process reference detector behind the backend interface.
class ReferenceBackend : public DetectorBackend {
 public:
  ReferenceBackend(std::vector<DetectorTemplate> templates, ReferenceDetectorOptions opts = {})
      : detector_(templates, opts) {
    for (const auto& t : templates) classes_.push_back(t.class_id);
    std::sort(classes_.begin(), classes_.end());
    classes_.erase(std::unique(classes_.begin(), classes_.end()), classes_.end());
  }

  int capacity() const override { return 1; }
  std::vector<int> classes() const override { return classes_; }

  std::uint64_t submit(const RgbImage& image, const Mask* mask) override {
    const std::uint64_t id = next_id_++;
    done_.emplace_back(id, detector_.detect(image, mask));
    return id;
  }

  std::pair<std::uint64_t, std::vector<Detection>> receive() override {
    if (done_.empty()) fail(ErrorCode::ProtocolViolation, "receive without a pending request");
    auto r = std::move(done_.front());
    done_.pop_front();
    return r;
  }

  void reset() override { done_.clear(); }

 private:
  ReferenceDetector detector_;
  std::vector<int> classes_;
  std::uint64_t next_id_ = 1;
  std::deque<std::pair<std::uint64_t, std::vector<Detection>>> done_;
};

namespace detail {

inline Detection parse_wire_detection(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("class_id") || !j.contains("score") || !j.contains("bbox")) {
    fail(ErrorCode::ProtocolViolation, "detection record lacks class_id/score/bbox");
  }
  const auto& b = j.at("bbox");
  if (!j.at("class_id").is_number_integer() || !j.at("score").is_number() || !b.is_array() || b.size() != 4) {
    fail(ErrorCode::ProtocolViolation, "detection record has wrong field types");
  }
  Detection d;
  d.class_id = j.at("class_id").get<int>();
  d.score = j.at("score").get<double>();
  for (const auto& v : b)
    if (!v.is_number()) fail(ErrorCode::ProtocolViolation, "bbox entries must be numbers");
  d.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
  if (!(d.score >= 0.0 && d.score <= 1.0)) fail(ErrorCode::ProtocolViolation, "score outside [0, 1]");
  if (!std::isfinite(d.bbox.x) || !std::isfinite(d.bbox.y) || !(d.bbox.w > 0.0) || !(d.bbox.h > 0.0) ||
      !std::isfinite(d.bbox.w) || !std::isfinite(d.bbox.h)) {
    fail(ErrorCode::ProtocolViolation, "bbox must be finite with positive extents");
  }
  return d;
}

inline void ignore_sigpipe() {
  static std::once_flag once;
  std::call_once(once, [] {
    struct sigaction current {};
    sigaction(SIGPIPE, nullptr, &current);
    if (current.sa_handler == SIG_DFL) signal(SIGPIPE, SIG_IGN);
  });
}

}  // namespace detail

struct SubprocessOptions {
  std::chrono::milliseconds timeout{30000};  // per request, and for the handshake
  std::filesystem::path scratch_dir;         // empty: a fresh directory under the system temp dir
};

/// Child process speaking the line-delimited JSON protocol on stdin/stdout.
/// Tiles are handed over as RGBA PNG files (alpha = validity mask).
class SubprocessBackend : public DetectorBackend {
 public:
  explicit SubprocessBackend(std::string command, SubprocessOptions opts = {})
      : command_(std::move(command)), opts_(std::move(opts)) {
    detail::ignore_sigpipe();
    if (opts_.scratch_dir.empty()) {
      std::string tmpl = (std::filesystem::temp_directory_path() / "georect_tiles_XXXXXX").string();
      if (::mkdtemp(tmpl.data()) == nullptr) fail(ErrorCode::IoFailure, "cannot create tile scratch directory");
      opts_.scratch_dir = tmpl;
      owns_scratch_ = true;
    } else {
      std::filesystem::create_directories(opts_.scratch_dir);
    }
    start();
  }

  ~SubprocessBackend() override {
    stop(true);
    if (owns_scratch_) {
      std::error_code ec;
      std::filesystem::remove_all(opts_.scratch_dir, ec);
    }
  }

  SubprocessBackend(const SubprocessBackend&) = delete;
  SubprocessBackend& operator=(const SubprocessBackend&) = delete;

  int capacity() const override { return capacity_; }
  std::vector<int> classes() const override { return classes_; }

  std::uint64_t submit(const RgbImage& image, const Mask* mask) override {
    if (pid_ <= 0) start();
    const std::uint64_t id = next_id_++;
    const auto path = opts_.scratch_dir / ("tile_" + std::to_string(id) + ".png");
    write_rgb(path, image, mask);
    const nlohmann::json req = {{"type", "detect"},
                                {"id", id},
                                {"image_path", path.string()},
                                {"width", image.width()},
                                {"height", image.height()}};
    send(req.dump());
    pending_.emplace(id, path);
    return id;
  }

  std::pair<std::uint64_t, std::vector<Detection>> receive() override {
    if (pending_.empty()) fail(ErrorCode::ProtocolViolation, "receive without a pending request");
    const auto deadline = std::chrono::steady_clock::now() + opts_.timeout;
    for (;;) {
      const nlohmann::json msg = read_message(deadline);
      const std::string type = msg.value("type", "");
      if (type != "result") continue;  // other record types are not ours to act on
      if (!msg.contains("id") || !msg.at("id").is_number_unsigned()) {
        fail(ErrorCode::ProtocolViolation, "result without a valid id");
      }
      const auto id = msg.at("id").get<std::uint64_t>();
      const auto it = pending_.find(id);
      if (it == pending_.end()) fail(ErrorCode::ProtocolViolation, "result for unknown request id " + std::to_string(id));
      std::error_code ec;
      std::filesystem::remove(it->second, ec);
      pending_.erase(it);
      if (!msg.contains("detections") || !msg.at("detections").is_array()) {
        fail(ErrorCode::ProtocolViolation, "result without a detections array");
      }
      std::vector<Detection> dets;
      for (const auto& d : msg.at("detections")) dets.push_back(detail::parse_wire_detection(d));
      return {id, std::move(dets)};
    }
  }

  /// Kills the child; the next submit starts a fresh one.
  void reset() override { stop(false); }

 private:
  void start() {
    int to_child[2], from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) != 0 || ::pipe2(from_child, O_CLOEXEC) != 0) {
      fail(ErrorCode::BackendUnavailable, "pipe failed: " + std::string(std::strerror(errno)));
    }
    const pid_t pid = ::fork();
    if (pid < 0) fail(ErrorCode::BackendUnavailable, "fork failed: " + std::string(std::strerror(errno)));
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    pid_ = pid;
    in_fd_ = to_child[1];
    out_fd_ = from_child[0];
    buffer_.clear();

    try {
      const auto hello = read_message(std::chrono::steady_clock::now() + opts_.timeout);
      if (hello.value("type", "") != "hello") fail(ErrorCode::ProtocolViolation, "expected hello");
      if (hello.value("protocol", -1) != kProtocolVersion) fail(ErrorCode::ProtocolViolation, "unsupported protocol version");
      capacity_ = std::max(1, hello.value("capacity", 1));
      classes_.clear();
      if (hello.contains("classes") && hello.at("classes").is_array()) {
        for (const auto& c : hello.at("classes"))
          if (c.is_number_integer()) classes_.push_back(c.get<int>());
      }
    } catch (const Error& e) {
      stop(false);
      fail(ErrorCode::BackendUnavailable, "detector '" + command_ + "' failed the handshake: " + e.what());
    }
  }

  void stop(bool polite) {
    if (pid_ <= 0) return;
    if (polite && in_fd_ >= 0) {
      const std::string bye = "{\"type\":\"bye\"}\n";
      [[maybe_unused]] auto n = ::write(in_fd_, bye.data(), bye.size());
    }
    if (in_fd_ >= 0) ::close(in_fd_);
    in_fd_ = -1;
    bool exited = false;
    if (polite) {
      for (int i = 0; i < 100 && !exited; ++i) {
        int status = 0;
        if (::waitpid(pid_, &status, WNOHANG) == pid_) exited = true;
        else ::usleep(10000);
      }
    }
    if (!exited) {
      ::kill(pid_, SIGKILL);
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
    if (out_fd_ >= 0) ::close(out_fd_);
    out_fd_ = -1;
    pid_ = -1;
    std::error_code ec;
    for (const auto& [id, path] : pending_) std::filesystem::remove(path, ec);
    pending_.clear();
  }

  void send(const std::string& line) {
    const std::string data = line + "\n";
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::write(in_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(ErrorCode::BackendUnavailable, "detector stdin closed: " + std::string(std::strerror(errno)));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  nlohmann::json read_message(std::chrono::steady_clock::time_point deadline) {
    const std::string line = read_line(deadline);
    try {
      auto j = nlohmann::json::parse(line);
      if (!j.is_object()) fail(ErrorCode::ProtocolViolation, "record is not an object: " + line);
      return j;
    } catch (const nlohmann::json::parse_error&) {
      fail(ErrorCode::ProtocolViolation, "malformed record: " + line.substr(0, 200));
    }
  }

  std::string read_line(std::chrono::steady_clock::time_point deadline) {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        return line;
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) fail(ErrorCode::Timeout, "detector did not answer in time");
      pollfd pfd{out_fd_, POLLIN, 0};
      const int r = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
      if (r < 0) {
        if (errno == EINTR) continue;
        fail(ErrorCode::BackendUnavailable, "poll failed");
      }
      if (r == 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(out_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(ErrorCode::BackendUnavailable, "read from detector failed");
      }
      if (n == 0) fail(ErrorCode::BackendUnavailable, "detector exited");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  std::string command_;
  SubprocessOptions opts_;
  bool owns_scratch_ = false;
  pid_t pid_ = -1;
  int in_fd_ = -1;
  int out_fd_ = -1;
  int capacity_ = 1;
  std::vector<int> classes_;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
  std::map<std::uint64_t, std::filesystem::path> pending_;
};

/// Clips a tile-space box to the tile; nullopt when nothing is left.
inline std::optional<BBox> clamp_to_tile(const BBox& b, int width, int height) {
  const double x0 = std::clamp(b.x, -0.5, width - 0.5), x1 = std::clamp(b.right(), -0.5, width - 0.5);
  const double y0 = std::clamp(b.y, -0.5, height - 0.5), y1 = std::clamp(b.bottom(), -0.5, height - 0.5);
  if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
  return BBox{x0, y0, x1 - x0, y1 - y0};
}

/// Sends every tile to the backend, keeping at most capacity() requests in
/// flight, and returns tile-space detections tagged with their tile. Output
/// order follows the tile order.
inline std::vector<Detection> detect_tiles(const std::vector<RectifiedTile>& tiles, DetectorBackend& backend) {
  std::vector<std::vector<Detection>> per_tile(tiles.size());
  std::map<std::uint64_t, std::size_t> in_flight;
  const std::size_t cap = static_cast<std::size_t>(std::max(1, backend.capacity()));
  std::size_t next = 0;
  try {
    while (next < tiles.size() || !in_flight.empty()) {
      while (next < tiles.size() && in_flight.size() < cap) {
        const auto& t = tiles[next];
        in_flight.emplace(backend.submit(t.image, t.mask.empty() ? nullptr : &t.mask), next);
        ++next;
      }
      auto [id, dets] = backend.receive();
      const auto it = in_flight.find(id);
      if (it == in_flight.end()) fail(ErrorCode::ProtocolViolation, "response id " + std::to_string(id) + " was not requested");
      const RectifiedTile& t = tiles[it->second];
      for (auto& d : dets) {
        const auto clipped = clamp_to_tile(d.bbox, t.image.width(), t.image.height());
        if (!clipped) continue;
        d.bbox = *clipped;
        d.tile = TileIndex{t.spec.plane_index, t.spec.i, t.spec.j};
        per_tile[it->second].push_back(d);
      }
      in_flight.erase(it);
    }
  } catch (...) {
    backend.reset();
    throw;
  }
  std::vector<Detection> out;
  for (auto& v : per_tile) out.insert(out.end(), v.begin(), v.end());
  return out;
}

/// Runs the backend on a whole frame; boxes come back in original coordinates.
inline std::vector<Detection> detect_image(const RgbImage& image, DetectorBackend& backend) {
  RectifiedTile t;
  t.image = image;
  t.spec.out_width = image.width();
  t.spec.out_height = image.height();
  auto dets = detect_tiles({t}, backend);
  for (auto& d : dets) d.tile.reset();
  return dets;
}

}  // namespace georect
