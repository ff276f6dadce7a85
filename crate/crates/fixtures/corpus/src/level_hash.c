/* Bucket update that flushes each field of an entry separately, all of
 * which live in one cache line. */
#include <immintrin.h>
#include <stdint.h>
#include <stdio.h>

#define BUCKETS 64
#define SLOTS 4

struct entry {
	uint64_t key;
	uint64_t value;
};

struct bucket {
	uint8_t token[SLOTS];
	uint8_t pad[12];
	struct entry slot[SLOTS];
} __attribute__((aligned(64)));

static struct bucket table[BUCKETS];

static uint64_t hash(uint64_t k)
{
	k ^= k >> 33;
	k *= 0xff51afd7ed558ccdull;
	k ^= k >> 33;
	return k;
}

int update(uint64_t key, uint64_t value)
{
	struct bucket *b = &table[hash(key) % BUCKETS];
	for (int i = 0; i < SLOTS; i++) {
		if (b->token[i] && b->slot[i].key == key) {
			b->slot[i].key = key;
			_mm_clflush(&b->slot[i].key);
			b->slot[i].value = value;
			_mm_clflush(&b->slot[i].value);
			b->token[i] = 1;
			_mm_clflush(&b->token[i]);
			_mm_sfence();
			return 0;
		}
	}
	for (int i = 0; i < SLOTS; i++) {
		if (!b->token[i]) {
			b->slot[i].key = key;
			b->slot[i].value = value;
			_mm_clflush(&b->slot[i]);
			_mm_mfence();
			b->token[i] = 1;
			_mm_clflush(&b->token[i]);
			return 0;
		}
	}
	return -1;
}

int main(void)
{
	uint64_t sum = 0;
	for (uint64_t k = 0; k < 200; k++)
		if (update(k % 150, k * 7) == 0)
			sum += k;
	for (int i = 0; i < BUCKETS; i++)
		for (int j = 0; j < SLOTS; j++)
			sum = sum * 31 + table[i].slot[j].value + table[i].token[j];
	printf("%llu\n", (unsigned long long)sum);
	return 0;
}
