/* Sorted insertion into a node by shifting entries right, flushing every
 * cache line the shift crosses. */
#include <immintrin.h>
#include <stdint.h>
#include <stdio.h>

#define CARDINALITY 31

struct node {
	uint64_t count;
	uint64_t keys[CARDINALITY];
	uint64_t ptrs[CARDINALITY];
} __attribute__((aligned(64)));

static struct node n;

static void flush_range(void *p, size_t len)
{
	uintptr_t a = (uintptr_t)p & ~(uintptr_t)63;
	for (; a < (uintptr_t)p + len; a += 64)
		_mm_clflush((void *)a);
}

void insert(uint64_t key, uint64_t ptr)
{
	uint64_t i = n.count;
	while (i > 0 && n.keys[i - 1] > key) {
		n.keys[i] = n.keys[i - 1];
		n.ptrs[i] = n.ptrs[i - 1];
		if (((uintptr_t)&n.keys[i] & 63) == 0)
			_mm_clflush(&n.keys[i]);
		i--;
	}
	n.keys[i] = key;
	n.ptrs[i] = ptr;
	flush_range(&n.keys[i], sizeof(uint64_t));
	_mm_mfence();
	n.count++;
	_mm_clflush(&n.count);
	_mm_mfence();
}

int main(void)
{
	uint64_t s = 0;
	for (uint64_t k = 0; k < CARDINALITY; k++)
		insert((k * 17) % 31, k);
	for (int i = 0; i < CARDINALITY; i++)
		s = s * 131 + n.keys[i] + n.ptrs[i];
	printf("%llu\n", (unsigned long long)s);
	return 0;
}
