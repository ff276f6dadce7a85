/* Log-structured writes to a PM-style buffer, flushed per record.
 * Prints a checksum of the buffer so runs before and after patching can
 * be compared. */
#include <immintrin.h>
#include <stdint.h>
#include <stdio.h>
#include <string.h>

#define RECORDS 512
#define LINE 64

struct record {
	uint64_t key;
	uint64_t value;
	uint64_t seq;
	uint8_t pad[LINE - 24];
};

static struct record log_area[RECORDS] __attribute__((aligned(64)));
static uint64_t tail;

static void persist(const void *p)
{
	_mm_clflush(p);
	_mm_sfence();
}

static void append(uint64_t key, uint64_t value)
{
	struct record *r = &log_area[tail % RECORDS];
	r->key = key;
	r->value = value;
	r->seq = tail;
	persist(r);
	tail++;
	_mm_clflush(&tail);
}

static uint64_t checksum(void)
{
	uint64_t h = 1469598103934665603ull;
	const uint8_t *p = (const uint8_t *)log_area;
	for (size_t i = 0; i < sizeof(log_area); i++) {
		h ^= p[i];
		h *= 1099511628211ull;
	}
	return h ^ tail;
}

int main(int argc, char **argv)
{
	(void)argv;
	uint64_t x = 88172645463325252ull + (uint64_t)argc;
	for (int i = 0; i < 3 * RECORDS; i++) {
		x ^= x << 13;
		x ^= x >> 7;
		x ^= x << 17;
		append(x & 0xffff, x);
	}
	memset(&log_area[0].pad, 0xab, sizeof(log_area[0].pad));
	_mm_clflush(&log_area[0]);
	_mm_mfence();
	printf("%016llx\n", (unsigned long long)checksum());
	return 0;
}
