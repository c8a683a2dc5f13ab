/* CRC-32 (IEEE, zlib-compatible) used by the compiled kernels.
 * libdeflate's carry-less-multiply implementation when the build found it,
 * zlib's table-driven one otherwise. */
#ifndef DIRECT_STORE_CRC_H
#define DIRECT_STORE_CRC_H
#include <stddef.h>
#include <stdint.h>

#ifdef DS_HAVE_LIBDEFLATE
#include <libdeflate.h>
#define DS_CRC_IMPL "libdeflate"
static inline uint32_t ds_crc32(const unsigned char *buf, size_t len) {
    return libdeflate_crc32(0, buf, len);
}
#else
#include <zlib.h>
#define DS_CRC_IMPL "zlib"
static inline uint32_t ds_crc32(const unsigned char *buf, size_t len) {
    return (uint32_t)crc32(0, buf, (uInt)len);
}
#endif
#endif
