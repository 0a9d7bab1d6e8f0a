#include <cstring>
#include <fstream>

#include "lrn/trainer.hpp"

namespace lrn {

namespace {

constexpr char kMagic[4] = {'L', 'R', 'N', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t len) {
  std::uint64_t h = 14695981039346656037ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

struct Writer {
  std::vector<std::uint8_t> bytes;

  void raw(const void* p, std::size_t len) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + len);
  }
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
};

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw codec_error("checkpoint: " + what + " at byte offset " +
                      std::to_string(pos));
  }
  void raw(void* p, std::size_t len) {
    if (bytes.size() - pos < len) fail("truncated");
    std::memcpy(p, bytes.data() + pos, len);
    pos += len;
  }
  std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
  std::uint16_t u16() { std::uint16_t v; raw(&v, 2); return v; }
  std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
  std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
};

void write_tensor(Writer& w, const std::string& name, int rank,
                  const std::array<int, 4>& dims, const float* data,
                  std::int64_t size) {
  w.u16(static_cast<std::uint16_t>(name.size()));
  w.raw(name.data(), name.size());
  w.u8(static_cast<std::uint8_t>(rank));
  for (int i = 0; i < rank; ++i) w.u32(static_cast<std::uint32_t>(dims[i]));
  w.raw(data, sizeof(float) * static_cast<std::size_t>(size));
}

// Tensor entries in checkpoint order: learnable params, BN running stats,
// momentum buffers, then the dataset mean pixel.
struct EntryList {
  std::vector<ParamRef<float>> refs;
  std::array<float, 3>* mean = nullptr;
};

EntryList collect_entries(Checkpoint& ckpt) {
  EntryList list;
  for (auto& r : learnable_params(ckpt.params)) list.refs.push_back(r);
  for (auto& r : bn_running_stats(ckpt.params)) list.refs.push_back(r);
  for (auto& r : learnable_params(ckpt.opt.velocity)) {
    r.name = "momentum." + r.name;
    list.refs.push_back(r);
  }
  list.mean = &ckpt.mean_pixel;
  return list;
}

}  // namespace

std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt) {
  auto& mut = const_cast<Checkpoint&>(ckpt);
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);

  std::string config = serialize_config(RunConfig{ckpt.model, ckpt.train});
  config += "iter=" + std::to_string(ckpt.opt.iter) + "\n";
  w.u32(static_cast<std::uint32_t>(config.size()));
  w.raw(config.data(), config.size());

  EntryList entries = collect_entries(mut);
  w.u32(static_cast<std::uint32_t>(entries.refs.size() + 1));
  for (const auto& r : entries.refs)
    write_tensor(w, r.name, r.rank, r.dims, r.data, r.size);
  write_tensor(w, "stats.mean_pixel", 1, {3, 0, 0, 0}, entries.mean->data(),
               3);

  w.u64(fnv1a(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint load_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 + 4 + 8)
    throw codec_error("checkpoint: too small (" +
                      std::to_string(bytes.size()) + " bytes)");

  const std::uint64_t expect = fnv1a(bytes.data(), bytes.size() - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != expect) throw codec_error("checkpoint: checksum mismatch");

  Reader r{bytes};
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw codec_error("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw codec_error("checkpoint: unsupported version " +
                      std::to_string(version));

  const std::uint32_t config_len = r.u32();
  if (bytes.size() - r.pos < config_len) r.fail("truncated config block");
  std::string config(reinterpret_cast<const char*>(bytes.data() + r.pos),
                     config_len);
  r.pos += config_len;

  // The config block is the serialized run config plus an iter= state line.
  std::uint64_t iter = 0;
  std::string cfg_text;
  {
    std::size_t start = 0;
    while (start < config.size()) {
      std::size_t end = config.find('\n', start);
      if (end == std::string::npos) end = config.size();
      const std::string line = config.substr(start, end - start);
      if (line.rfind("iter=", 0) == 0)
        iter = std::stoull(line.substr(5));
      else if (!line.empty())
        cfg_text += line + "\n";
      start = end + 1;
    }
  }
  RunConfig run = parse_config_text(cfg_text);

  Checkpoint ckpt;
  ckpt.model = run.model;
  ckpt.train = run.train;
  ckpt.params = init_params<float>(run.model, 0);
  ckpt.opt.velocity = zeros_like(ckpt.params);
  ckpt.opt.iter = iter;

  EntryList entries = collect_entries(ckpt);
  const std::uint32_t count = r.u32();
  if (count != entries.refs.size() + 1)
    throw codec_error("checkpoint: tensor count " + std::to_string(count) +
                      " does not match config-derived layout (" +
                      std::to_string(entries.refs.size() + 1) + ")");

  auto read_into = [&](const std::string& want_name, int want_rank,
                       const std::array<int, 4>& want_dims, float* data,
                       std::int64_t size) {
    const std::uint16_t name_len = r.u16();
    if (bytes.size() - r.pos < name_len) r.fail("truncated tensor name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + r.pos),
                     name_len);
    r.pos += name_len;
    if (name != want_name)
      throw codec_error("checkpoint: tensor '" + name + "', expected '" +
                        want_name + "'");
    const int rank = r.u8();
    if (rank != want_rank)
      throw dim_error("checkpoint tensor " + name + " has rank " +
                      std::to_string(rank) + ", expected " +
                      std::to_string(want_rank));
    for (int i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32();
      if (static_cast<int>(d) != want_dims[i])
        throw dim_error("checkpoint tensor " + name +
                        " shape mismatch: dim " + std::to_string(i) + " is " +
                        std::to_string(d) + ", expected " +
                        std::to_string(want_dims[i]));
    }
    r.raw(data, sizeof(float) * static_cast<std::size_t>(size));
  };

  for (const auto& ref : entries.refs)
    read_into(ref.name, ref.rank, ref.dims, ref.data, ref.size);
  read_into("stats.mean_pixel", 1, {3, 0, 0, 0}, entries.mean->data(), 3);

  if (r.pos != bytes.size() - 8)
    r.fail("trailing bytes before checksum");
  return ckpt;
}

void save_checkpoint_file(const Checkpoint& ckpt,
                          const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = save_checkpoint(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw codec_error("cannot write checkpoint: " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw codec_error("short checkpoint write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint_file(const std::filesystem::path& path) {
  return load_checkpoint(read_file(path));
}

}  // namespace lrn
