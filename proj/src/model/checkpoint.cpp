#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "maskattn/error.hpp"
#include "maskattn/model.hpp"

namespace maskattn {

namespace {

constexpr char kMagic[] = "MASKCK01";
constexpr std::size_t kMagicLen = 8;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(std::string("checkpoint truncated while reading ") + what);
    }
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string text(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const SegmentationModel& model) {
  std::string out(kMagic, kMagicLen);
  const std::string config = format_key_values(model.config().to_key_values());
  put_u64(out, config.size());
  out += config;
  const auto& items = model.params().items();
  put_u64(out, items.size());
  for (const auto& p : items) {
    put_u64(out, p.name.size());
    out += p.name;
    put_u64(out, p.tensor.rank());
    for (std::size_t d : p.tensor.shape()) put_u64(out, d);
    for (double v : p.tensor.data()) put_f64(out, v);
  }
  return out;
}

SegmentationModel deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < kMagicLen || bytes.compare(0, kMagicLen, kMagic) != 0) {
    throw IoError("not a checkpoint (bad magic)");
  }
  Reader in(bytes);
  in.text(kMagicLen, "magic");
  const std::uint64_t config_len = in.u64("config length");
  SegmentationModel model(ModelConfig::from_text(in.text(config_len, "config")), 0);
  auto& items = model.params().items();
  const std::uint64_t blocks = in.u64("block count");
  if (blocks != items.size()) {
    throw IoError("checkpoint has " + std::to_string(blocks) + " parameter blocks, model expects " +
                  std::to_string(items.size()));
  }
  for (auto& p : items) {
    const std::string name = in.text(in.u64("name length"), "name");
    if (name != p.name) throw IoError("checkpoint block '" + name + "', expected '" + p.name + "'");
    const std::uint64_t rank = in.u64("rank");
    if (rank > 8) throw IoError("checkpoint block '" + name + "' has implausible rank");
    Shape shape;
    for (std::uint64_t i = 0; i < rank; ++i) shape.push_back(in.u64("dims"));
    if (shape != p.tensor.shape()) {
      throw IoError("checkpoint block '" + name + "' has shape " + shape_to_string(shape) +
                    ", expected " + shape_to_string(p.tensor.shape()));
    }
    auto data = p.tensor.mutable_data();
    in.need(8 * data.size(), "payload");
    for (double& v : data) v = in.f64("payload");
  }
  if (!in.done()) throw IoError("trailing bytes after checkpoint payload");
  return model;
}

void save_checkpoint(const SegmentationModel& model, const std::string& path) {
  write_text_file(path, serialize_checkpoint(model));
}

SegmentationModel load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_text_file(path));
}

}  // namespace maskattn
