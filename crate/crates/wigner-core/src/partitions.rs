//! Set partitions of `{0, .., n-1}` as restricted-growth strings, plus
//! the Möbius coefficients of the partition lattice used to convert
//! between moments and cumulants.

/// Visit every set partition of `{0, .., n-1}` exactly once.  The slice
/// passed to the closure is a restricted-growth string: `rgs[i]` is the
/// block index of element `i`, blocks numbered by first appearance.
pub fn for_each_partition(n: usize, mut visit: impl FnMut(&[usize])) {
    if n == 0 {
        visit(&[]);
        return;
    }
    let mut rgs = vec![0usize; n];
    // max[i] = 1 + largest block index among rgs[0..=i]
    let mut max = vec![1usize; n];
    loop {
        visit(&rgs);
        // find the rightmost position (never 0) that can still grow
        let mut i = n;
        loop {
            if i == 1 {
                return;
            }
            i -= 1;
            if rgs[i] < max[i - 1] {
                break;
            }
        }
        rgs[i] += 1;
        max[i] = max[i - 1].max(rgs[i] + 1);
        for j in i + 1..n {
            rgs[j] = 0;
            max[j] = max[j - 1];
        }
    }
}

/// Partition as explicit blocks of element indices.
pub fn blocks_of(rgs: &[usize]) -> Vec<Vec<usize>> {
    let count = rgs.iter().max().map_or(0, |&m| m + 1);
    let mut blocks = vec![Vec::new(); count];
    for (element, &block) in rgs.iter().enumerate() {
        blocks[block].push(element);
    }
    blocks
}

/// Möbius function of the partition lattice between a partition with
/// `block_count` blocks and the one-block partition:
/// `(-1)^(b-1) * (b-1)!`.
pub fn mobius_coefficient(block_count: usize) -> i64 {
    let sign = if block_count % 2 == 1 { 1 } else { -1 };
    sign * (1..block_count as i64).product::<i64>().max(1)
}

pub fn bell_number(n: usize) -> u64 {
    let mut count = 0u64;
    for_each_partition(n, |_| count += 1);
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bell_numbers_up_to_order_six() {
        let expected = [1u64, 1, 2, 5, 15, 52, 203];
        for (n, &want) in expected.iter().enumerate() {
            assert_eq!(bell_number(n), want, "bell({n})");
        }
    }

    #[test]
    fn partitions_of_three_elements() {
        let mut seen = Vec::new();
        for_each_partition(3, |rgs| seen.push(rgs.to_vec()));
        assert_eq!(
            seen,
            vec![
                vec![0, 0, 0],
                vec![0, 0, 1],
                vec![0, 1, 0],
                vec![0, 1, 1],
                vec![0, 1, 2],
            ]
        );
    }

    #[test]
    fn blocks_group_by_first_appearance() {
        assert_eq!(blocks_of(&[0, 1, 0, 2]), vec![vec![0, 2], vec![1], vec![3]]);
    }

    #[test]
    fn mobius_coefficients() {
        assert_eq!(mobius_coefficient(1), 1);
        assert_eq!(mobius_coefficient(2), -1);
        assert_eq!(mobius_coefficient(3), 2);
        assert_eq!(mobius_coefficient(4), -6);
    }
}
