use layerfuse::doc::{load_graph, parse_graph, serialize_graph};
use layerfuse_core::{Activation, ConvParams, Graph, Layer, Op, PoolKind, PoolParams, TensorShape};
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_./ \"-]{0,8}"
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (1usize..8, 1usize..4, 1usize..6, 1usize..6, 0usize..3, 1usize..4, any::<bool>(), any::<bool>()).prop_map(
            |(c, group, kh, kw, pad, stride, bias, relu)| {
                let mut p = ConvParams::new(c * group, kh, pad, stride).with_group(group);
                p.kernel_w = kw;
                p.has_bias = bias;
                p.with_activation(if relu { Activation::Relu } else { Activation::None })
            }
        )
        .prop_map(Op::Conv),
        (any::<bool>(), 1usize..4, 1usize..3, 0usize..2).prop_map(|(max, kernel, stride, pad)| Op::Pool(PoolParams {
            kind: if max { PoolKind::Max } else { PoolKind::Avg },
            kernel,
            stride,
            pad
        })),
        Just(Op::Relu),
        Just(Op::Add),
        Just(Op::Concat),
    ]
}

fn graph() -> impl Strategy<Value = Graph> {
    (name(), 1usize..6, 1usize..40, prop::collection::vec((op(), any::<u16>(), any::<u16>()), 0..10)).prop_map(
        |(title, c, hw, layers)| {
            let mut g = Graph::new(title).with_input("in", TensorShape::new(c, hw, hw + 1));
            let mut names = vec!["in".to_string()];
            for (i, (op, a, b)) in layers.into_iter().enumerate() {
                let lname = format!("l{i}");
                let x = names[a as usize % names.len()].clone();
                let y = names[b as usize % names.len()].clone();
                let inputs: Vec<&str> = match op {
                    Op::Add | Op::Concat => vec![&x, &y],
                    _ => vec![&x],
                };
                g = g.with_layer(Layer::new(&lname, op, &inputs));
                names.push(lname);
            }
            let last = names.last().unwrap().clone();
            g.with_output(&last)
        },
    )
}

proptest! {
    #[test]
    fn graph_documents_round_trip(g in graph()) {
        let text = serialize_graph(&g);
        let back = parse_graph(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(serialize_graph(&back), text);
    }

    #[test]
    fn shapes_survive_a_round_trip(g in graph()) {
        let inferred = g.infer_shapes();
        prop_assume!(inferred.is_ok());
        let inferred = inferred.unwrap();
        let again = load_graph(&serialize_graph(&inferred)).unwrap();
        prop_assert_eq!(again, inferred);
    }
}
