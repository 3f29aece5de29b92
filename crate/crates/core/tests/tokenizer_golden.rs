use grumt::corpus::tokenize;

#[test]
fn french_sample_matches_golden() {
    let text = include_str!("data/french_sample.txt");
    let golden = include_str!("data/french_sample.tok");
    let ours: Vec<String> = text.lines().map(|l| tokenize(l).join(" ")).collect();
    let expected: Vec<&str> = golden.lines().collect();
    assert_eq!(ours.len(), 50);
    assert_eq!(ours.len(), expected.len());
    for (i, (a, b)) in ours.iter().zip(&expected).enumerate() {
        assert_eq!(a, b, "line {}", i + 1);
    }
}
