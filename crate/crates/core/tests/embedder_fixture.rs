//! Frozen feature fixture for the embedder.
//!
//! The expected matrices were recorded once from a fixed model (seed 424242)
//! on a fixed synthetic sample set (seed 99) and checked in; extraction must
//! keep reproducing them within 1e-6.

use dgtl_core::embedder::{Embedder, EmbedderConfig, FeatureChoice, Fusion};
use dgtl_core::pooling::PoolingMethod;
use dgtl_core::synth::{generate, SyntheticSpec};

const EXPECTED_F_BN: [[f64; 5]; 16] = [
    [0.34927969463548375, 0.45892913401973734, 0.3787678806991845, 0.4620009225411123, 0.557205334670305],
    [0.34710952646312837, 0.45873733369490205, 0.37908091567783697, 0.46126836650885283, 0.5591101758510053],
    [0.3341285463059561, 0.45170759196889143, 0.3525061859629991, 0.44175749859431523, 0.6040762097572184],
    [0.33284639606936833, 0.45231017358474196, 0.35385738686714857, 0.4378576842327465, 0.6063780847072752],
    [0.35079934312576105, 0.43989508044719977, 0.3900661473085729, 0.4601371312745328, 0.5652913940678526],
    [0.3525386961540057, 0.44027079515228196, 0.387523712689231, 0.45745842358741406, 0.5678338290754466],
    [0.3333228344318793, 0.4609150814313601, 0.3400316443153039, 0.4315136501649389, 0.6120683183607709],
    [0.32347368693424294, 0.4665254311626526, 0.33221370181175075, 0.4314125691398398, 0.617443153218468],
    [0.35857575497014343, 0.4466211430710916, 0.3861734047009047, 0.4642683597532604, 0.5543265951974446],
    [0.3575656865216221, 0.44773121070717303, 0.3860016974266725, 0.46094564890159184, 0.5569697847490723],
    [0.3113240341530609, 0.458647504767019, 0.31370531355496056, 0.4466792318544002, 0.6283203420286486],
    [0.3127696897087594, 0.4619901393842527, 0.3185943269367049, 0.44112783821941076, 0.6266132120397898],
    [0.3518669505620534, 0.44227351345573057, 0.3977086058188634, 0.4694198077100951, 0.5495968498678996],
    [0.352232394872981, 0.44651263106943156, 0.3960064122179229, 0.46687940160439617, 0.5493280951647272],
    [0.31462348781997374, 0.46036597792022804, 0.3496726073901825, 0.4414298609310263, 0.6098720954469986],
    [0.30198153929146115, 0.46557152557308024, 0.3446883926651263, 0.43770901554457503, 0.617779114389314],
];

const EXPECTED_F_BNF: [[f64; 10]; 16] = [
    [0.23866420645948147, 0.30064712399781757, 0.2719190364706178, 0.32335772090890047, 0.3752419016857555, 0.25508038396701455, 0.3351578162640533, 0.2766157263849857, 0.33740115593576114, 0.40692932597900544],
    [0.23761781933451873, 0.3016046943948105, 0.2716909361231755, 0.3234971278056297, 0.376398864214765, 0.25327816961820204, 0.33473051978053736, 0.2766069875361761, 0.3365773586296265, 0.4079703700367793],
    [0.20293141233567158, 0.3021228181939695, 0.2303743304343828, 0.30026734553787104, 0.4004733348589975, 0.2509145079937676, 0.3392107302682852, 0.26471523368336874, 0.33173868751355534, 0.45363225213083375],
    [0.20563870585590735, 0.3021150605988617, 0.23331500051311566, 0.2994616723568211, 0.39918272654672193, 0.24974110352162857, 0.33937709171281155, 0.265506057235674, 0.32853310877646125, 0.4549772321841979],
    [0.23291723909089904, 0.3038894125030718, 0.26928969775810524, 0.3222841530992678, 0.381467093614534, 0.25574682599538656, 0.3207012008429698, 0.2843739050749968, 0.33545846978366967, 0.412120155377634],
    [0.2331605782634633, 0.30407475846617626, 0.26949712360533057, 0.3225180570337683, 0.3822102601363676, 0.25675938193952785, 0.32065602579962327, 0.28223951027926775, 0.3331740412746761, 0.41356215527068335],
    [0.19048863245586672, 0.30725126288284155, 0.228708392207759, 0.3014261288715179, 0.4060132997397649, 0.2497250366574124, 0.34531698316613185, 0.25475126834934353, 0.323289468869664, 0.45856079287217794],
    [0.1869694497411981, 0.3065158548311029, 0.22600367268591348, 0.2999462143864879, 0.40515057369510166, 0.2433369540802539, 0.35094934149365425, 0.24991173491966479, 0.32453527061620324, 0.46447900491031996],
    [0.23555426167571047, 0.30407095405751877, 0.27261723267464844, 0.32638578542134644, 0.3723731510767728, 0.26167320788909776, 0.32592495615951284, 0.2818127890937704, 0.3388031380653743, 0.40452377600274275],
    [0.23445785907348882, 0.3050249165327759, 0.27230189805553073, 0.3263232568003218, 0.37393782537580184, 0.26068589288740923, 0.3264217312689545, 0.2814173757236151, 0.3360558145984499, 0.4060629168896499],
    [0.18421131298956622, 0.3012975609941822, 0.2122522295423366, 0.3093458179419896, 0.40878737370187557, 0.23451463393291377, 0.3454906781523994, 0.23630840764122285, 0.33647519963803557, 0.47330208669661405],
    [0.185189959108044, 0.2993171357218992, 0.21287332275482182, 0.3066779494385201, 0.404819921924282, 0.23672933174249838, 0.34967140540343383, 0.24113788705966474, 0.3338811329573968, 0.47427142663768657],
    [0.2447639412307524, 0.3012134355473585, 0.27741065172817053, 0.3280561474317131, 0.3683131941593959, 0.255952422918831, 0.3217152880683943, 0.2892982165912637, 0.341461842203625, 0.39978362596301287],
    [0.24472460207493132, 0.3027019367518378, 0.27812820006199035, 0.32900984308888354, 0.3702957377932058, 0.25540120552666656, 0.32376313456103484, 0.2871414343170223, 0.33853093508997467, 0.3983138966685111],
    [0.2076034918197293, 0.2982495806821475, 0.22853732956278217, 0.30838550270847565, 0.3993844490348682, 0.23567569760412904, 0.34484734039194936, 0.26193001752904815, 0.3306628222166976, 0.4568382117294633],
    [0.20394854373923366, 0.2976934444145275, 0.2258579650703159, 0.3071274601225984, 0.39883802426355547, 0.22706376048114565, 0.3500691519673854, 0.2591755867473929, 0.329118976276646, 0.46451597401972683],
];

fn fixture_model() -> Embedder {
    Embedder::new(EmbedderConfig {
        input_shape: (3, 3, 2),
        spec_layers: vec![4],
        shared_layers: vec![5],
        feature_dim: 5,
        num_identities: 4,
        fusion: Fusion::Concat,
        pool_fine: PoolingMethod::Max,
        pool_coarse: PoolingMethod::Gem { p: 3.0 },
        bn_epsilon: 1e-5,
        seed: 424242,
    })
    .unwrap()
}

fn fixture_samples() -> dgtl_core::data::Dataset {
    generate(&SyntheticSpec {
        num_identities: 4,
        samples_per_identity_per_modality: 2,
        input_shape: (3, 3, 2),
        identity_scale: 1.0,
        modality_offset_scale: 0.5,
        noise_scale: 0.1,
        seed: 99,
    })
    .unwrap()
}

#[test]
fn extracted_features_match_the_recorded_fixture() {
    let model = fixture_model();
    let data = fixture_samples();
    let refs: Vec<_> = data.samples().iter().collect();

    let f_bn = model.extract_features(&refs, FeatureChoice::FBn).unwrap();
    assert_eq!(f_bn.features.dim(), (16, 5));
    for (i, row) in f_bn.features.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!(
                (v - EXPECTED_F_BN[i][j]).abs() < 1e-6,
                "f_bn[{i}][{j}]: {v} vs {}",
                EXPECTED_F_BN[i][j]
            );
        }
    }

    let f_bnf = model.extract_features(&refs, FeatureChoice::FBnf).unwrap();
    assert_eq!(f_bnf.features.dim(), (16, 10));
    for (i, row) in f_bnf.features.rows().into_iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert!(
                (v - EXPECTED_F_BNF[i][j]).abs() < 1e-6,
                "f_bnf[{i}][{j}]: {v} vs {}",
                EXPECTED_F_BNF[i][j]
            );
        }
    }
}
