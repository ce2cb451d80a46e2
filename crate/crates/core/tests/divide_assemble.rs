mod support;

#[test]
fn every_pattern_matches_the_oracle() {
    assert_eq!(support::divide_assemble_exhaustive(), 5 * (4 + 8 + 16));
}
