// Template-matching detector speaking the line-delimited JSON protocol on
// stdin/stdout.

#include <iostream>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "georect/dataset_io.hpp"
#include "georect/detector_backend.hpp"
#include "georect/reference_detector.hpp"
#include "georect/synth.hpp"

using nlohmann::json;

int main(int argc, char** argv) {
  CLI::App app{"georect reference detector worker"};
  std::string templates_dir;
  double threshold = 0.8;
  int capacity = 1;
  app.add_option("--templates", templates_dir, "directory of <class_id>_*.png templates")->required();
  app.add_option("--threshold", threshold, "correlation threshold")->check(CLI::Range(0.0, 1.0));
  app.add_option("--capacity", capacity, "advertised request capacity")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::ios::sync_with_stdio(false);
  try {
    auto templates = georect::load_templates(templates_dir);
    std::set<int> classes;
    for (const auto& t : templates) classes.insert(t.class_id);
    georect::ReferenceDetectorOptions opts;
    opts.threshold = threshold;
    const georect::ReferenceDetector detector(std::move(templates), opts);

    std::cout << json{{"type", "hello"}, {"protocol", georect::kProtocolVersion}, {"capacity", capacity},
                      {"classes", classes}}
                     .dump()
              << std::endl;

    std::string line;
    while (std::getline(std::cin, line)) {
      if (line.empty()) continue;
      json msg;
      try {
        msg = json::parse(line);
      } catch (const json::parse_error& e) {
        std::cerr << "reference_worker: ignoring malformed record: " << e.what() << "\n";
        continue;
      }
      const std::string type = msg.value("type", "");
      if (type == "bye") break;
      if (type != "detect") continue;

      json dets = json::array();
      try {
        georect::Mask mask;
        const auto image = georect::read_rgb(msg.at("image_path").get<std::string>(), &mask);
        for (const auto& d : detector.detect(image, &mask)) {
          dets.push_back({{"class_id", d.class_id}, {"score", d.score}, {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}}});
        }
      } catch (const std::exception& e) {
        std::cerr << "reference_worker: request " << msg.value("id", 0) << ": " << e.what() << "\n";
      }
      std::cout << json{{"type", "result"}, {"id", msg.value("id", 0)}, {"detections", dets}}.dump() << std::endl;
    }
  } catch (const std::exception& e) {
    std::cerr << "reference_worker: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
